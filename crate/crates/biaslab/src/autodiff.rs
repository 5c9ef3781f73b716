//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on an append-only [`Tape`]. `backward` walks the
//! tape in reverse and emits the adjoint computation *as new tape nodes*, so
//! a scalar built from gradient outputs can be differentiated again (double
//! backprop), which the attribution-feedback loss requires.
//!
//! Conventions:
//! - activations are NHWC (`[n, h, w, c]`), kernels are `[kh, kw, c_in, c_out]`;
//! - conv2d is stride 1 with zero padding that preserves spatial size;
//! - relu's derivative at 0 is 0 (subgradient choice), so finite-difference
//!   checks skip points within 1e-6 of the kink;
//! - maxpool ties break toward the first (row-major) maximal element;
//! - no broadcasting beyond scalar-tensor; reshape explicitly.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape. Ids are tape-local and ordered: every input
/// id precedes the node that consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a same-padded stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn cols_shape(&self) -> Vec<usize> {
        vec![self.n * self.h * self.w, self.kh * self.kw * self.c]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Im2col(NodeId, ConvGeom),
    Col2im(NodeId, ConvGeom),
    Relu(NodeId),
    /// 1.0 where the input is strictly positive, else 0.0. Piecewise
    /// constant, so it carries no gradient of its own.
    GtzMask(NodeId),
    MaxPool2x2 {
        src: NodeId,
        indices: Arc<Vec<u32>>,
        in_shape: Vec<usize>,
    },
    /// Scatter pooled values back to the stored argmax positions.
    Unpool2x2 {
        src: NodeId,
        indices: Arc<Vec<u32>>,
        in_shape: Vec<usize>,
    },
    /// Gather values at the stored argmax positions (adjoint of unpool).
    GatherPool {
        src: NodeId,
        indices: Arc<Vec<u32>>,
        out_shape: Vec<usize>,
    },
    RowSum(NodeId),
    RowBroadcast(NodeId, usize),
    BroadcastRow(NodeId, usize),
    ColSum(NodeId),
    BroadcastScalar(NodeId, Vec<usize>),
    Softmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a computation. Single-writer; independent tapes
/// may be evaluated on independent threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value out of {:?}", op);
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input, parameter, or constant.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── elementwise ────────────────────────────────────────────────

    fn zip_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(bool, bool, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let a_scalar = self.value(a).is_scalar();
        let b_scalar = self.value(b).is_scalar();
        if sa == sb {
            Ok((false, false, sa.to_vec()))
        } else if a_scalar {
            Ok((true, false, sb.to_vec()))
        } else if b_scalar {
            Ok((false, true, sa.to_vec()))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_ew(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (a_scalar, b_scalar, shape) = self.zip_shapes(op_name, a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<f64> = if a_scalar && !b_scalar {
            let s = va[0];
            vb.iter().map(|y| f(s, *y)).collect()
        } else if b_scalar && !a_scalar {
            let s = vb[0];
            va.iter().map(|x| f(*x, s)).collect()
        } else {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(make(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_ew("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_ew("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_ew("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_ew("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| -x).collect(),
        )?;
        Ok(self.push(Op::Neg(a), value))
    }

    /// Multiply by a plain constant (not a tape value).
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x * factor).collect(),
        )?;
        Ok(self.push(Op::Scale(a, factor), value))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x.max(0.0)).collect(),
        )?;
        Ok(self.push(Op::Relu(a), value))
    }

    fn gtz_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .map(|x| if *x > 0.0 { 1.0 } else { 0.0 })
                .collect(),
        )?;
        Ok(self.push(Op::GtzMask(a), value))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x.ln()).collect(),
        )?;
        Ok(self.push(Op::Log(a), value))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|x| x * x).collect(),
        )?;
        Ok(self.push(Op::Square(a), value))
    }

    // ── reductions and broadcasts ──────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    fn require_2d(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `[n, m] -> [n, 1]` row-wise sum.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.require_2d("row_sum", a)?;
        let va = self.value(a).data();
        let data: Vec<f64> = (0..n).map(|i| va[i * m..(i + 1) * m].iter().sum()).collect();
        Ok(self.push(Op::RowSum(a), Tensor::new(vec![n, 1], data)?))
    }

    /// `[n, 1] -> [n, m]`, repeating each row value across `m` columns.
    pub fn row_broadcast(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        let (n, one) = self.require_2d("row_broadcast", a)?;
        if one != 1 {
            return Err(Error::ShapeMismatch {
                op: "row_broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: vec![n, 1],
            });
        }
        let va = self.value(a).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(std::iter::repeat(va[i]).take(m));
        }
        Ok(self.push(Op::RowBroadcast(a, m), Tensor::new(vec![n, m], data)?))
    }

    /// `[1, m] -> [n, m]`, repeating the row `n` times.
    pub fn broadcast_row(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (one, m) = self.require_2d("broadcast_row", a)?;
        if one != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_row",
                lhs: self.shape(a).to_vec(),
                rhs: vec![1, m],
            });
        }
        let va = self.value(a).data();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(va);
        }
        Ok(self.push(Op::BroadcastRow(a, n), Tensor::new(vec![n, m], data)?))
    }

    /// `[n, m] -> [1, m]` column-wise sum.
    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.require_2d("col_sum", a)?;
        let va = self.value(a).data();
        let mut data = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                data[j] += va[i * m + j];
            }
        }
        Ok(self.push(Op::ColSum(a), Tensor::new(vec![1, m], data)?))
    }

    /// Scalar -> arbitrary shape, repeating the value.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).item()?;
        let numel: usize = shape.iter().product();
        Ok(self.push(
            Op::BroadcastScalar(a, shape.to_vec()),
            Tensor::new(shape.to_vec(), vec![v; numel])?,
        ))
    }

    // ── linear algebra and structure ───────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, ka) = self.require_2d("matmul", a)?;
        let (kb, nb) = self.require_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![ma, ka],
                rhs: vec![kb, nb],
            });
        }
        let value = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.require_2d("transpose", a)?;
        let value = kernels::transpose(self.value(a));
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// `[n, h, w, c] -> [n, h*w*c]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "flatten",
                lhs: s,
                rhs: vec![],
            });
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[s[0], rest])
    }

    pub fn im2col(&mut self, a: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "im2col",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "im2col: kernel must be odd-sized for same padding, got {kh}x{kw}"
            )));
        }
        let geom = ConvGeom {
            n: s[0],
            h: s[1],
            w: s[2],
            c: s[3],
            kh,
            kw,
        };
        let value = kernels::im2col(self.value(a), &geom);
        Ok(self.push(Op::Im2col(a, geom), value))
    }

    fn col2im(&mut self, a: NodeId, geom: ConvGeom) -> Result<NodeId> {
        let expect = geom.cols_shape();
        if self.shape(a) != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "col2im",
                lhs: self.shape(a).to_vec(),
                rhs: expect,
            });
        }
        let value = kernels::col2im(self.value(a), &geom);
        Ok(self.push(Op::Col2im(a, geom), value))
    }

    /// 2×2 max pooling with stride 2 over `[n, h, w, c]`; odd trailing
    /// rows/columns are dropped.
    pub fn maxpool2x2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2x2",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let in_shape = s.to_vec();
        let (value, indices) = kernels::maxpool2x2(self.value(a));
        Ok(self.push(
            Op::MaxPool2x2 {
                src: a,
                indices: Arc::new(indices),
                in_shape,
            },
            value,
        ))
    }

    fn unpool2x2(&mut self, a: NodeId, indices: Arc<Vec<u32>>, in_shape: Vec<usize>) -> NodeId {
        let value = kernels::unpool2x2(self.value(a), &indices, &in_shape);
        self.push(
            Op::Unpool2x2 {
                src: a,
                indices,
                in_shape,
            },
            value,
        )
    }

    fn gather_pool(&mut self, a: NodeId, indices: Arc<Vec<u32>>, out_shape: Vec<usize>) -> NodeId {
        let value = kernels::gather(self.value(a), &indices, &out_shape);
        self.push(
            Op::GatherPool {
                src: a,
                indices,
                out_shape,
            },
            value,
        )
    }

    /// Row-wise softmax of `[n, m]`, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.require_2d("softmax", a)?;
        let value = kernels::softmax(self.value(a));
        Ok(self.push(Op::Softmax(a), value))
    }

    // ── composites ─────────────────────────────────────────────────

    /// Stride-1, same-padded convolution: input `[n, h, w, c_in]`, kernel
    /// `[kh, kw, c_in, c_out]`, optional bias `[1, c_out]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (n, h, w) = (xs[0], xs[1], xs[2]);
        let (kh, kw, ci, co) = (ks[0], ks[1], ks[2], ks[3]);
        let cols = self.im2col(x, kh, kw)?;
        let wmat = self.reshape(kernel, &[kh * kw * ci, co])?;
        let mut out = self.matmul(cols, wmat)?;
        if let Some(b) = bias {
            let brows = self.broadcast_row(b, n * h * w)?;
            out = self.add(out, brows)?;
        }
        self.reshape(out, &[n, h, w, co])
    }

    /// Fully connected layer: `x [n, d] @ w [d, k] + b [1, k]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let n = self.shape(y)[0];
                let brows = self.broadcast_row(b, n)?;
                self.add(y, brows)
            }
            None => Ok(y),
        }
    }

    // ── differentiation ────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `output` with respect to each node
    /// in `wrt`. The adjoint computation is recorded on this tape, so the
    /// returned gradient nodes are themselves differentiable.
    pub fn backward(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
    ) -> Result<HashMap<NodeId, NodeId>> {
        if !self.value(output).is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: self.shape(output).to_vec(),
            });
        }
        let mut adjoint: HashMap<usize, NodeId> = HashMap::new();
        let seed = self.leaf(Tensor::scalar(1.0));
        adjoint.insert(output.0, seed);

        for id in (0..=output.0).rev() {
            let Some(&g) = adjoint.get(&id) else { continue };
            let op = self.nodes[id].op.clone();
            self.accumulate(op, NodeId(id), g, &mut adjoint)?;
        }

        let mut grads = HashMap::new();
        for &w in wrt {
            let gid = match adjoint.get(&w.0) {
                Some(&g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.leaf(Tensor::zeros(&shape))
                }
            };
            grads.insert(w, gid);
        }
        Ok(grads)
    }

    /// Second-order gradients: differentiate a scalar that was built from
    /// `backward` outputs. Every primitive in this crate has a registered
    /// derivative, so the composition is differentiable end to end.
    pub fn grad_of_grad(
        &mut self,
        scalar_of_gradient: NodeId,
        wrt: &[NodeId],
    ) -> Result<HashMap<NodeId, NodeId>> {
        self.backward(scalar_of_gradient, wrt)
    }

    fn contribute(
        &mut self,
        adjoint: &mut HashMap<usize, NodeId>,
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        match adjoint.get(&target.0) {
            Some(&existing) => {
                let merged = self.add(existing, contribution)?;
                adjoint.insert(target.0, merged);
            }
            None => {
                adjoint.insert(target.0, contribution);
            }
        }
        Ok(())
    }

    /// If `input` was a scalar broadcast against a non-scalar sibling, its
    /// adjoint contribution must collapse back to a scalar.
    fn collapse_if_scalar(&mut self, input: NodeId, contribution: NodeId) -> Result<NodeId> {
        if self.value(input).is_scalar() && !self.value(contribution).is_scalar() {
            self.sum(contribution)
        } else {
            Ok(contribution)
        }
    }

    fn accumulate(
        &mut self,
        op: Op,
        node: NodeId,
        g: NodeId,
        adjoint: &mut HashMap<usize, NodeId>,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ca = self.collapse_if_scalar(a, g)?;
                self.contribute(adjoint, a, ca)?;
                let cb = self.collapse_if_scalar(b, g)?;
                self.contribute(adjoint, b, cb)?;
            }
            Op::Sub(a, b) => {
                let ca = self.collapse_if_scalar(a, g)?;
                self.contribute(adjoint, a, ca)?;
                let ng = self.neg(g)?;
                let cb = self.collapse_if_scalar(b, ng)?;
                self.contribute(adjoint, b, cb)?;
            }
            Op::Neg(a) => {
                let ng = self.neg(g)?;
                self.contribute(adjoint, a, ng)?;
            }
            Op::Mul(a, b) => {
                let gb = self.mul(g, b)?;
                let ca = self.collapse_if_scalar(a, gb)?;
                self.contribute(adjoint, a, ca)?;
                let ga = self.mul(g, a)?;
                let cb = self.collapse_if_scalar(b, ga)?;
                self.contribute(adjoint, b, cb)?;
            }
            Op::Div(a, b) => {
                let da = self.div(g, b)?;
                let ca = self.collapse_if_scalar(a, da)?;
                self.contribute(adjoint, a, ca)?;
                // d/db (a/b) = -a / b^2
                let bb = self.mul(b, b)?;
                let a_over_bb = self.div(a, bb)?;
                let gdb = self.mul(g, a_over_bb)?;
                let ndb = self.neg(gdb)?;
                let cb = self.collapse_if_scalar(b, ndb)?;
                self.contribute(adjoint, b, cb)?;
            }
            Op::Scale(a, factor) => {
                let ga = self.scale(g, factor)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::Matmul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                self.contribute(adjoint, a, ga)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                self.contribute(adjoint, b, gb)?;
            }
            Op::Transpose(a) => {
                let gt = self.transpose(g)?;
                self.contribute(adjoint, a, gt)?;
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let gr = self.reshape(g, &shape)?;
                self.contribute(adjoint, a, gr)?;
            }
            Op::Im2col(a, geom) => {
                let gc = self.col2im(g, geom)?;
                self.contribute(adjoint, a, gc)?;
            }
            Op::Col2im(a, geom) => {
                let gi = self.im2col(g, geom.kh, geom.kw)?;
                self.contribute(adjoint, a, gi)?;
            }
            Op::Relu(a) => {
                let mask = self.gtz_mask(a)?;
                let ga = self.mul(g, mask)?;
                self.contribute(adjoint, a, ga)?;
            }
            // Piecewise-constant almost everywhere: no gradient flows.
            Op::GtzMask(_) => {}
            Op::MaxPool2x2 {
                src,
                indices,
                in_shape,
            } => {
                let ga = self.unpool2x2(g, indices, in_shape);
                self.contribute(adjoint, src, ga)?;
            }
            Op::Unpool2x2 {
                src,
                indices,
                in_shape: _,
            } => {
                let shape = self.shape(src).to_vec();
                let ga = self.gather_pool(g, indices, shape);
                self.contribute(adjoint, src, ga)?;
            }
            Op::GatherPool {
                src,
                indices,
                out_shape: _,
            } => {
                let shape = self.shape(src).to_vec();
                let ga = self.unpool2x2(g, indices, shape);
                self.contribute(adjoint, src, ga)?;
            }
            Op::RowSum(a) => {
                let m = self.shape(a)[1];
                let ga = self.row_broadcast(g, m)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::RowBroadcast(a, _) => {
                let ga = self.row_sum(g)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::BroadcastRow(a, _) => {
                let ga = self.col_sum(g)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::ColSum(a) => {
                let n = self.shape(a)[0];
                let ga = self.broadcast_row(g, n)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::BroadcastScalar(a, _) => {
                let ga = self.sum(g)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.broadcast_scalar(g, &shape)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).numel() as f64;
                let gb = self.broadcast_scalar(g, &shape)?;
                let ga = self.scale(gb, 1.0 / n)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::Square(a) => {
                let two_a = self.scale(a, 2.0)?;
                let ga = self.mul(g, two_a)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::Log(a) => {
                let ga = self.div(g, a)?;
                self.contribute(adjoint, a, ga)?;
            }
            Op::Softmax(a) => {
                // ds_j = s_j * (g_j - sum_k g_k s_k), row-wise.
                let s = node;
                let m = self.shape(s)[1];
                let gs = self.mul(g, s)?;
                let rs = self.row_sum(gs)?;
                let rb = self.row_broadcast(rs, m)?;
                let diff = self.sub(g, rb)?;
                let ga = self.mul(s, diff)?;
                self.contribute(adjoint, a, ga)?;
            }
        }
        Ok(())
    }

    /// Recompute every node value from the leaves. Returns the recomputed
    /// values; used to verify that replay is bit-exact.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Add(a, b) => replay_zip(&values, *a, *b, |x, y| x + y),
                Op::Sub(a, b) => replay_zip(&values, *a, *b, |x, y| x - y),
                Op::Mul(a, b) => replay_zip(&values, *a, *b, |x, y| x * y),
                Op::Div(a, b) => replay_zip(&values, *a, *b, |x, y| x / y),
                Op::Neg(a) => map_t(&values[a.0], |x| -x),
                Op::Scale(a, f) => map_t(&values[a.0], |x| x * f),
                Op::Relu(a) => map_t(&values[a.0], |x| x.max(0.0)),
                Op::GtzMask(a) => map_t(&values[a.0], |x| if x > 0.0 { 1.0 } else { 0.0 }),
                Op::Log(a) => map_t(&values[a.0], |x| x.ln()),
                Op::Square(a) => map_t(&values[a.0], |x| x * x),
                Op::Matmul(a, b) => kernels::matmul(&values[a.0], &values[b.0]),
                Op::Transpose(a) => kernels::transpose(&values[a.0]),
                Op::Reshape(a) => values[a.0]
                    .reshaped(node.value.shape().to_vec())
                    .expect("replay reshape"),
                Op::Im2col(a, geom) => kernels::im2col(&values[a.0], geom),
                Op::Col2im(a, geom) => kernels::col2im(&values[a.0], geom),
                Op::MaxPool2x2 { src, .. } => kernels::maxpool2x2(&values[src.0]).0,
                Op::Unpool2x2 {
                    src,
                    indices,
                    in_shape,
                } => kernels::unpool2x2(&values[src.0], indices, in_shape),
                Op::GatherPool {
                    src,
                    indices,
                    out_shape,
                } => kernels::gather(&values[src.0], indices, out_shape),
                Op::RowSum(a) => {
                    let t = &values[a.0];
                    let (n, m) = (t.shape()[0], t.shape()[1]);
                    let data = (0..n)
                        .map(|i| t.data()[i * m..(i + 1) * m].iter().sum())
                        .collect();
                    Tensor::new(vec![n, 1], data).expect("replay row_sum")
                }
                Op::RowBroadcast(a, m) => {
                    let t = &values[a.0];
                    let n = t.shape()[0];
                    let mut data = Vec::with_capacity(n * m);
                    for i in 0..n {
                        data.extend(std::iter::repeat(t.data()[i]).take(*m));
                    }
                    Tensor::new(vec![n, *m], data).expect("replay row_broadcast")
                }
                Op::BroadcastRow(a, n) => {
                    let t = &values[a.0];
                    let m = t.shape()[1];
                    let mut data = Vec::with_capacity(n * m);
                    for _ in 0..*n {
                        data.extend_from_slice(t.data());
                    }
                    Tensor::new(vec![*n, m], data).expect("replay broadcast_row")
                }
                Op::ColSum(a) => {
                    let t = &values[a.0];
                    let (n, m) = (t.shape()[0], t.shape()[1]);
                    let mut data = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            data[j] += t.data()[i * m + j];
                        }
                    }
                    Tensor::new(vec![1, m], data).expect("replay col_sum")
                }
                Op::BroadcastScalar(a, shape) => {
                    let v = values[a.0].data()[0];
                    Tensor::new(shape.clone(), vec![v; shape.iter().product()])
                        .expect("replay broadcast_scalar")
                }
                Op::Softmax(a) => kernels::softmax(&values[a.0]),
                Op::Sum(a) => Tensor::scalar(values[a.0].data().iter().sum()),
                Op::Mean(a) => {
                    let t = &values[a.0];
                    Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
                }
            };
            values.push(v);
        }
        values
    }
}

fn replay_zip(values: &[Tensor], a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ta, tb) = (&values[a.0], &values[b.0]);
    if ta.shape() == tb.shape() {
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("replay zip")
    } else if ta.is_scalar() {
        let s = ta.data()[0];
        map_t(tb, |y| f(s, y))
    } else {
        let s = tb.data()[0];
        map_t(ta, |x| f(x, s))
    }
}

fn map_t(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("replay map")
}

/// Shared numeric kernels. Tape primitives and the tape-free model forward
/// both dispatch here, so there is exactly one implementation of each.
pub(crate) mod kernels {
    use super::ConvGeom;
    use crate::exec;
    use crate::tensor::Tensor;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        exec::for_each_chunk_mut(&mut out, n, |i, row| {
            let arow = &ad[i * k..(i + 1) * k];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &bkj) in row.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        });
        Tensor::new(vec![m, n], out).expect("matmul shape")
    }

    pub fn transpose(a: &Tensor) -> Tensor {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out).expect("transpose shape")
    }

    /// NHWC image to patch matrix `[n*h*w, kh*kw*c]` with same zero padding.
    pub fn im2col(x: &Tensor, geom: &ConvGeom) -> Tensor {
        let ConvGeom { n, h, w, c, kh, kw } = *geom;
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = x.data();
        let patch = kh * kw * c;
        let mut out = vec![0.0; n * h * w * patch];
        exec::for_each_chunk_mut(&mut out, h * w * patch, |nn, chunk| {
            let base = nn * h * w * c;
            for i in 0..h {
                for j in 0..w {
                    let dst = (i * w + j) * patch;
                    for di in 0..kh {
                        let si = i as isize + di as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let sj = j as isize + dj as isize - pw as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let src = base + ((si as usize) * w + sj as usize) * c;
                            let d = dst + (di * kw + dj) * c;
                            chunk[d..d + c].copy_from_slice(&xd[src..src + c]);
                        }
                    }
                }
            }
        });
        Tensor::new(vec![n * h * w, patch], out).expect("im2col shape")
    }

    /// Adjoint of `im2col`: scatter-add patches back into NHWC.
    pub fn col2im(cols: &Tensor, geom: &ConvGeom) -> Tensor {
        let ConvGeom { n, h, w, c, kh, kw } = *geom;
        let (ph, pw) = (kh / 2, kw / 2);
        let cd = cols.data();
        let patch = kh * kw * c;
        let mut out = vec![0.0; n * h * w * c];
        exec::for_each_chunk_mut(&mut out, h * w * c, |nn, chunk| {
            let cbase = nn * h * w * patch;
            for i in 0..h {
                for j in 0..w {
                    let src_row = cbase + (i * w + j) * patch;
                    for di in 0..kh {
                        let si = i as isize + di as isize - ph as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let sj = j as isize + dj as isize - pw as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            let s = src_row + (di * kw + dj) * c;
                            let d = ((si as usize) * w + sj as usize) * c;
                            for cc in 0..c {
                                chunk[d + cc] += cd[s + cc];
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(vec![n, h, w, c], out).expect("col2im shape")
    }

    /// Returns the pooled tensor and the flat input index of each winner.
    pub fn maxpool2x2(x: &Tensor) -> (Tensor, Vec<u32>) {
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut idx = vec![0u32; n * oh * ow * c];
        for nn in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for cc in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let src = ((nn * h + 2 * i + di) * w + 2 * j + dj) * c + cc;
                                // strict > keeps the first row-major maximum
                                if xd[src] > best {
                                    best = xd[src];
                                    best_at = src;
                                }
                            }
                        }
                        let dst = ((nn * oh + i) * ow + j) * c + cc;
                        out[dst] = best;
                        idx[dst] = best_at as u32;
                    }
                }
            }
        }
        (
            Tensor::new(vec![n, oh, ow, c], out).expect("maxpool shape"),
            idx,
        )
    }

    pub fn unpool2x2(pooled: &Tensor, indices: &[u32], in_shape: &[usize]) -> Tensor {
        let numel: usize = in_shape.iter().product();
        let mut out = vec![0.0; numel];
        for (v, &at) in pooled.data().iter().zip(indices) {
            out[at as usize] += v;
        }
        Tensor::new(in_shape.to_vec(), out).expect("unpool shape")
    }

    pub fn gather(full: &Tensor, indices: &[u32], out_shape: &[usize]) -> Tensor {
        let fd = full.data();
        let data = indices.iter().map(|&at| fd[at as usize]).collect();
        Tensor::new(out_shape.to_vec(), data).expect("gather shape")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(a: &Tensor) -> Tensor {
        let (n, m) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &ad[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        Tensor::new(vec![n, m], out).expect("softmax shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        let b = tape.leaf(t1(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(a).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 2.0]));
        let b = tape.leaf(t1(&[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        // f(x) = x*x at x = 3 -> grad 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y, &[x]).unwrap();
        assert_eq!(tape.value(grads[&x]).item().unwrap(), 6.0);
    }

    #[test]
    fn relu_gradient_at_negative_and_kink() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &[x]).unwrap();
        assert_eq!(tape.value(grads[&x]).item().unwrap(), 0.0);

        // subgradient 0 at the kink itself
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &[x]).unwrap();
        assert_eq!(tape.value(grads[&x]).item().unwrap(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y, &[x]),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn second_order_cubic() {
        // f(x) = x^3, g = (f'(x))^2; dg/dx = 2 * 3x^2 * 6x = 288 at x = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let x2 = tape.mul(x, x).unwrap();
        let f = tape.mul(x2, x).unwrap();
        let grads = tape.backward(f, &[x]).unwrap();
        let fprime = grads[&x];
        assert!((tape.value(fprime).item().unwrap() - 12.0).abs() < 1e-12);
        let g = tape.mul(fprime, fprime).unwrap();
        let grads2 = tape.grad_of_grad(g, &[x]).unwrap();
        assert!((tape.value(grads2[&x]).item().unwrap() - 288.0).abs() < 1e-9);
    }

    #[test]
    fn linearity_of_differentiation() {
        // backward of a sum of scalars equals the sum of backwards
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.5, -1.5, 2.0]));
        let sq = tape.square(x).unwrap();
        let s1 = tape.sum(sq).unwrap();
        let lg = tape.relu(x).unwrap();
        let s2 = tape.sum(lg).unwrap();
        let total = tape.add(s1, s2).unwrap();

        let g_total = tape.backward(total, &[x]).unwrap()[&x];
        let g1 = tape.backward(s1, &[x]).unwrap()[&x];
        let g2 = tape.backward(s2, &[x]).unwrap()[&x];
        let want: Vec<f64> = tape
            .value(g1)
            .data()
            .iter()
            .zip(tape.value(g2).data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(g_total).data(), want.as_slice());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4, 4, 1], (0..16).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap());
        let k = tape.leaf(Tensor::new(vec![3, 3, 1, 2], (0..18).map(|i| (i as f64).sin()).collect()).unwrap());
        let y = tape.conv2d(x, k, None).unwrap();
        let r = tape.relu(y).unwrap();
        let p = tape.maxpool2x2(r).unwrap();
        let f = tape.flatten(p).unwrap();
        let s = tape.mean(f).unwrap();
        let _ = tape.backward(s, &[x, k]).unwrap();

        let replayed = tape.replay();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v.data(), tape.value(NodeId(i)).data(), "node {i} differs");
        }
    }

    #[test]
    fn maxpool_tie_breaks_to_first() {
        let mut tape = Tape::new();
        // all equal: winner must be the top-left element of each 2x2 block
        let x = tape.leaf(Tensor::new(vec![1, 2, 2, 1], vec![7.0; 4]).unwrap());
        let p = tape.maxpool2x2(x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s, &[x]).unwrap()[&x];
        assert_eq!(tape.value(g).data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
