use std::fmt;
use std::sync::Arc;

use super::conv::ConvPlan;
use super::real::matmul;
use super::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written first-order vector-Jacobian product.
///
/// Gradients produced by a custom op enter the graph as constants, so they
/// cannot be differentiated a second time.
pub trait CustomOp<T: Real>: Send + Sync + fmt::Debug {
    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T>;

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone)]
enum Op<T: Real> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    MatMul { ta: bool, tb: bool },
    Linear,
    SumRows,
    BroadcastRows(usize),
    RowSum,
    BroadcastCols(usize),
    SumAll,
    Fill(Vec<usize>),
    Reshape,
    LeakyRelu(f64),
    MaskMul(f64),
    Sigmoid,
    Sqrt,
    ConcatCols(usize),
    SliceCols { start: usize, end: usize },
    PadCols { start: usize, total: usize },
    Im2Col(Arc<ConvPlan>),
    Col2Im(Arc<ConvPlan>),
    Custom(Arc<dyn CustomOp<T>>),
}

impl<T: Real> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(c) => return write!(f, "add_scalar({c})"),
            Op::MatMul { .. } => "matmul",
            Op::Linear => "linear",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(n) => return write!(f, "broadcast_rows({n})"),
            Op::RowSum => "row_sum",
            Op::BroadcastCols(n) => return write!(f, "broadcast_cols({n})"),
            Op::SumAll => "sum_all",
            Op::Fill(shape) => return write!(f, "fill({shape:?})"),
            Op::Reshape => "reshape",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::MaskMul(_) => "mask_mul",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { start, end } => return write!(f, "slice_cols({start}..{end})"),
            Op::PadCols { start, total } => return write!(f, "pad_cols({start}, {total})"),
            Op::Im2Col(_) => "im2col",
            Op::Col2Im(_) => "col2im",
            Op::Custom(_) => "custom",
        };
        f.write_str(name)
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    parents: Vec<Var>,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Every operation evaluates eagerly and appends a node. [`Graph::grad`]
/// walks the record backwards and expresses each vector-Jacobian product
/// with graph operations, so the returned gradients are themselves nodes
/// that can be differentiated again (second order, as needed by a
/// gradient penalty).
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: Vec<Var>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            (Op::Leaf, Vec::new())
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.v(a).zip_map(self.v(b), |x, y| x + y);
        self.push(out, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.v(a).zip_map(self.v(b), |x, y| x - y);
        self.push(out, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.v(a).zip_map(self.v(b), |x, y| x * y);
        self.push(out, Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.v(a).zip_map(self.v(b), |x, y| x / y);
        self.push(out, Op::Div, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.v(a).map(|x| x * k);
        self.push(out, Op::Scale(c), vec![a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let out = self.v(a).map(|x| x + k);
        self.push(out, Op::AddScalar(c), vec![a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.v(a).map(|x| x.sqrt());
        self.push(out, Op::Sqrt, vec![a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.v(a).map(sigmoid);
        self.push(out, Op::Sigmoid, vec![a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self
            .v(a)
            .map(|x| if x > T::zero() { x } else { x * s });
        self.push(out, Op::LeakyRelu(slope), vec![a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// `g * d/dx leaky_relu(x)`; constant in `x`.
    pub fn mask_mul(&mut self, g: Var, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let out = self
            .v(g)
            .zip_map(self.v(x), |gv, xv| if xv > T::zero() { gv } else { gv * s });
        self.push(out, Op::MaskMul(slope), vec![g, x])
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.v(a), self.v(b));
        let (out, m, n) = matmul(av.data(), av.dims2(), ta, bv.data(), bv.dims2(), tb);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { ta, tb }, vec![a, b])
    }

    /// `x W^T + b` with `x: [R, I]`, `W: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.v(x), self.v(w), self.v(b));
        let (mut out, m, n) = matmul(xv.data(), xv.dims2(), false, wv.data(), wv.dims2(), true);
        let bias = bv.data();
        assert_eq!(bias.len(), n, "linear: bias width");
        for row in out.chunks_exact_mut(n.max(1)).take(m) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(Tensor::new(vec![m, n], out), Op::Linear, vec![x, w, b])
    }

    // ---- reductions and broadcasts --------------------------------------

    /// `[R, C] -> [C]`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.v(a).dims2();
        let mut out = vec![T::zero(); c];
        for row in self.v(a).data().chunks_exact(c.max(1)).take(r) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        self.push(Tensor::new(vec![c], out), Op::SumRows, vec![a])
    }

    /// `[C] -> [R, C]`
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let src = self.v(a).data().to_vec();
        let c = src.len();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&src);
        }
        self.push(Tensor::new(vec![rows, c], out), Op::BroadcastRows(rows), vec![a])
    }

    /// `[R, C] -> [R]`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.v(a).dims2();
        let out: Vec<T> = if c == 0 {
            vec![T::zero(); r]
        } else {
            self.v(a)
                .data()
                .chunks_exact(c)
                .map(|row| row.iter().copied().sum())
                .collect()
        };
        self.push(Tensor::new(vec![r], out), Op::RowSum, vec![a])
    }

    /// `[R] -> [R, C]`
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let src = self.v(a).data();
        let r = src.len();
        let mut out = Vec::with_capacity(r * cols);
        for &x in src {
            out.extend(std::iter::repeat_n(x, cols));
        }
        self.push(Tensor::new(vec![r, cols], out), Op::BroadcastCols(cols), vec![a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.v(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.v(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn fill(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let x = self.v(a).item();
        let out = Tensor::full(shape.clone(), x);
        self.push(out, Op::Fill(shape), vec![a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let out = self.v(a).clone().reshaped(shape);
        self.push(out, Op::Reshape, vec![a])
    }

    // ---- column plumbing ------------------------------------------------

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.v(a).dims2();
        let (rb, cb) = self.v(b).dims2();
        assert_eq!(ra, rb, "concat_cols: row count");
        let (ad, bd) = (self.v(a).data(), self.v(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        self.push(Tensor::new(vec![ra, ca + cb], out), Op::ConcatCols(ca), vec![a, b])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.v(a).dims2();
        assert!(start <= end && end <= c, "slice_cols {start}..{end} of {c}");
        let d = self.v(a).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            out.extend_from_slice(&d[row * c + start..row * c + end]);
        }
        self.push(
            Tensor::new(vec![r, end - start], out),
            Op::SliceCols { start, end },
            vec![a],
        )
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (r, w) = self.v(a).dims2();
        assert!(start + w <= total, "pad_cols overflow");
        let d = self.v(a).data();
        let mut out = vec![T::zero(); r * total];
        for row in 0..r {
            out[row * total + start..row * total + start + w]
                .copy_from_slice(&d[row * w..(row + 1) * w]);
        }
        self.push(Tensor::new(vec![r, total], out), Op::PadCols { start, total }, vec![a])
    }

    pub fn im2col(&mut self, a: Var, plan: &Arc<ConvPlan>) -> Var {
        let cols = plan.im2col(self.v(a).data());
        let g = &plan.geom;
        self.push(
            Tensor::new(vec![g.rows(), g.cols()], cols),
            Op::Im2Col(plan.clone()),
            vec![a],
        )
    }

    pub fn col2im(&mut self, a: Var, plan: &Arc<ConvPlan>) -> Var {
        let x = plan.col2im(self.v(a).data());
        let g = &plan.geom;
        self.push(
            Tensor::new(vec![g.batch * g.in_positions(), g.channels], x),
            Op::Col2Im(plan.clone()),
            vec![a],
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.v(v)).collect();
        let out = op.forward(&vals);
        self.push(out, Op::Custom(op), inputs.to_vec())
    }

    // ---- differentiation ------------------------------------------------

    /// Gradients of the one-element `output` with respect to `wrt`.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.v(output).len(), 1, "grad() needs a scalar output; use grad_seeded");
        let seed = self.constant(Tensor::full(self.v(output).shape().to_vec(), T::one()));
        self.grad_seeded(output, seed, wrt)
    }

    /// Vector-Jacobian product of `output` with the upstream gradient `seed`.
    ///
    /// Returned gradients are graph nodes; when `seed` or any traversed
    /// value requires grad they can be differentiated again.
    pub fn grad_seeded(&mut self, output: Var, seed: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.v(output).shape(),
            self.v(seed).shape(),
            "grad seed shape must match output"
        );
        let end = output.0 + 1;
        let mut on_path = vec![false; end];
        for w in wrt {
            if w.0 < end {
                on_path[w.0] = true;
            }
        }
        for i in 0..end {
            if !on_path[i] && self.nodes[i].requires_grad {
                on_path[i] = self.nodes[i].parents.iter().any(|p| on_path[p.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if on_path[output.0] {
            grads[output.0] = Some(seed);
        }
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            let parents = self.nodes[i].parents.clone();
            if parents.is_empty() {
                continue;
            }
            let needs: Vec<bool> = parents.iter().map(|p| on_path[p.0]).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let contribs = self.backward_node(i, g, &needs);
            for ((p, c), need) in parents.iter().zip(contribs).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(c) = c {
                    grads[p.0] = Some(match grads[p.0] {
                        None => c,
                        Some(prev) => self.add(prev, c),
                    });
                }
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.v(*w).shape().to_vec();
                    self.constant(Tensor::zeros(shape))
                }
            })
            .collect()
    }

    fn backward_node(&mut self, i: usize, g: Var, needs: &[bool]) -> Vec<Option<Var>> {
        let op = self.nodes[i].op.clone();
        let parents = self.nodes[i].parents.clone();
        let out = Var(i);
        let want = |k: usize| needs.get(k).copied().unwrap_or(false);
        match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => {
                let gb = if want(1) { Some(self.scale(g, -1.0)) } else { None };
                vec![Some(g), gb]
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let ga = if want(0) { Some(self.mul(g, b)) } else { None };
                let gb = if want(1) { Some(self.mul(g, a)) } else { None };
                vec![ga, gb]
            }
            Op::Div => {
                let b = parents[1];
                let ga = if want(0) { Some(self.div(g, b)) } else { None };
                let gb = if want(1) {
                    let t = self.mul(g, out);
                    let t = self.div(t, b);
                    Some(self.scale(t, -1.0))
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(self.scale(g, c))],
            Op::AddScalar(_) => vec![Some(g)],
            Op::MatMul { ta, tb } => {
                let (a, b) = (parents[0], parents[1]);
                let ga = if want(0) {
                    Some(if ta {
                        self.matmul(b, g, tb, true)
                    } else {
                        self.matmul(g, b, false, !tb)
                    })
                } else {
                    None
                };
                let gb = if want(1) {
                    Some(if tb {
                        self.matmul(g, a, true, ta)
                    } else {
                        self.matmul(a, g, !ta, false)
                    })
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Linear => {
                let (x, w) = (parents[0], parents[1]);
                let gx = if want(0) { Some(self.matmul(g, w, false, false)) } else { None };
                let gw = if want(1) { Some(self.matmul(g, x, true, false)) } else { None };
                let gb = if want(2) { Some(self.sum_rows(g)) } else { None };
                vec![gx, gw, gb]
            }
            Op::SumRows => {
                let rows = self.v(parents[0]).dims2().0;
                vec![Some(self.broadcast_rows(g, rows))]
            }
            Op::BroadcastRows(_) => vec![Some(self.sum_rows(g))],
            Op::RowSum => {
                let cols = self.v(parents[0]).dims2().1;
                vec![Some(self.broadcast_cols(g, cols))]
            }
            Op::BroadcastCols(_) => vec![Some(self.row_sum(g))],
            Op::SumAll => {
                let shape = self.v(parents[0]).shape().to_vec();
                vec![Some(self.fill(g, shape))]
            }
            Op::Fill(_) => {
                let s = self.sum_all(g);
                let shape = self.v(parents[0]).shape().to_vec();
                vec![Some(self.reshape(s, shape))]
            }
            Op::Reshape => {
                let shape = self.v(parents[0]).shape().to_vec();
                vec![Some(self.reshape(g, shape))]
            }
            Op::LeakyRelu(s) => vec![Some(self.mask_mul(g, parents[0], s))],
            Op::MaskMul(s) => {
                let ga = if want(0) { Some(self.mask_mul(g, parents[1], s)) } else { None };
                vec![ga, None]
            }
            Op::Sigmoid => {
                let one_minus = self.scale(out, -1.0);
                let one_minus = self.add_scalar(one_minus, 1.0);
                let d = self.mul(out, one_minus);
                vec![Some(self.mul(g, d))]
            }
            Op::Sqrt => {
                let half = self.scale(g, 0.5);
                vec![Some(self.div(half, out))]
            }
            Op::ConcatCols(ca) => {
                let total = self.v(out).dims2().1;
                let ga = if want(0) { Some(self.slice_cols(g, 0, ca)) } else { None };
                let gb = if want(1) { Some(self.slice_cols(g, ca, total)) } else { None };
                vec![ga, gb]
            }
            Op::SliceCols { start, .. } => {
                let total = self.v(parents[0]).dims2().1;
                vec![Some(self.pad_cols(g, start, total))]
            }
            Op::PadCols { start, .. } => {
                let w = self.v(parents[0]).dims2().1;
                vec![Some(self.slice_cols(g, start, start + w))]
            }
            Op::Im2Col(plan) => {
                let gx = self.col2im(g, &plan);
                let shape = self.v(parents[0]).shape().to_vec();
                vec![Some(self.reshape(gx, shape))]
            }
            Op::Col2Im(plan) => {
                let gx = self.im2col(g, &plan);
                let shape = self.v(parents[0]).shape().to_vec();
                vec![Some(self.reshape(gx, shape))]
            }
            Op::Custom(op) => {
                let result = {
                    let inputs: Vec<&Tensor<T>> = parents.iter().map(|&p| self.v(p)).collect();
                    op.vjp(&inputs, self.v(out), self.v(g), needs)
                };
                result
                    .into_iter()
                    .map(|t| t.map(|t| self.constant(t)))
                    .collect()
            }
        }
    }

    /// Name of the operation that produced `v`; used in diagnostics.
    pub fn op_name(&self, v: Var) -> String {
        format!("{:?}", self.nodes[v.0].op)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
