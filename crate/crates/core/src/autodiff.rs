//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every vector-Jacobian product is itself expressed with graph ops, so the
//! gradients returned by [`Graph::grad`] with `create_graph = true` can be
//! differentiated again. The gradient penalty relies on this: it needs the
//! parameter gradient of a norm of an input gradient.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    MulConst(usize, Rc<Tensor<T>>),
    Powf(usize, T),
    Exp(usize),
    Tanh(usize),
    LeakyRelu(usize, T),
    MaxConst(usize, T),
    Reshape(usize),
    SumAll(usize),
    Expand(usize),
    RowSum(usize),
    RowExpand(usize),
    RowScale(usize, Rc<Vec<T>>),
    ChannelSum(usize),
    ChannelExpand(usize),
    SpatialSum(usize),
    SpatialExpand(usize),
    MatMul(usize, usize, bool, bool),
    Conv(usize, usize, ConvGeom),
    ConvT(usize, usize, ConvGeom),
    ConvW(usize, usize, ConvGeom),
    LogSumExp(usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    SliceRows(usize, usize),
    PadRows(usize, usize),
    PickCols(usize, Rc<Vec<usize>>),
    ScatterCols(usize, Rc<Vec<usize>>),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | MatMul(a, b, ..)
            | Conv(a, b, _)
            | ConvT(a, b, _)
            | ConvW(a, b, _) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | AddScalar(a, _)
            | MulConst(a, _)
            | Powf(a, _)
            | Exp(a)
            | Tanh(a)
            | LeakyRelu(a, _)
            | MaxConst(a, _)
            | Reshape(a)
            | SumAll(a)
            | Expand(a)
            | RowSum(a)
            | RowExpand(a)
            | RowScale(a, _)
            | ChannelSum(a)
            | ChannelExpand(a)
            | SpatialSum(a)
            | SpatialExpand(a)
            | LogSumExp(a)
            | SliceCols(a, _)
            | PadCols(a, _)
            | SliceRows(a, _)
            | PadRows(a, _)
            | PickCols(a, _)
            | ScatterCols(a, _) => vec![*a],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// An append-only computation tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    no_grad: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            no_grad: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or image batch).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A value the tape never differentiates through.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad: requires_grad && !self.no_grad.get(),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn op_node(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { graph: self, id }
    }

    /// Gradients of the sum of `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves
    /// differentiable; otherwise they are recorded as constants.
    /// `None` means `output` does not depend on that input.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g, T>,
        wrt: &[Var<'g, T>],
        create_graph: bool,
    ) -> Vec<Option<Var<'g, T>>> {
        let end = output.id + 1;
        let mut needed = vec![false; end];
        for w in wrt {
            if w.id < end {
                needed[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..end {
                if !needed[i]
                    && nodes[i].requires_grad
                    && nodes[i].op.parents().iter().any(|&p| needed[p])
                {
                    needed[i] = true;
                }
            }
        }
        let mut result: HashMap<usize, Var<'g, T>> = HashMap::new();
        if !needed[output.id] {
            return wrt.iter().map(|_| None).collect();
        }

        let saved = self.no_grad.replace(!create_graph);
        let mut grads: HashMap<usize, Var<'g, T>> = HashMap::new();
        let seed = Tensor::full(output.value().shape(), T::one());
        grads.insert(output.id, self.constant(seed));
        let is_wrt: std::collections::HashSet<usize> = wrt.iter().map(|w| w.id).collect();

        for i in (0..end).rev() {
            let Some(g) = grads.remove(&i) else { continue };
            if is_wrt.contains(&i) {
                result.insert(i, g);
            }
            let op = self.nodes.borrow()[i].op.clone();
            for (parent, pg) in self.vjp(i, &op, g, &needed) {
                let acc = match grads.remove(&parent) {
                    Some(prev) => prev.add(pg),
                    None => pg,
                };
                grads.insert(parent, acc);
            }
        }
        self.no_grad.set(saved);
        wrt.iter().map(|w| result.get(&w.id).copied()).collect()
    }

    fn vjp<'g>(
        &'g self,
        id: usize,
        op: &Op<T>,
        g: Var<'g, T>,
        needed: &[bool],
    ) -> Vec<(usize, Var<'g, T>)> {
        use Op::*;
        let mut out = Vec::new();
        let mut push = |p: usize, f: &dyn Fn() -> Var<'g, T>| {
            if needed[p] {
                out.push((p, f()));
            }
        };
        let this = self.var(id);
        match op {
            Leaf => {}
            Add(a, b) => {
                push(*a, &|| g);
                push(*b, &|| g);
            }
            Sub(a, b) => {
                push(*a, &|| g);
                push(*b, &|| g.scale(-T::one()));
            }
            Mul(a, b) => {
                push(*a, &|| g.mul(self.var(*b)));
                push(*b, &|| g.mul(self.var(*a)));
            }
            Scale(a, c) => push(*a, &|| g.scale(*c)),
            AddScalar(a, _) => push(*a, &|| g),
            MulConst(a, m) => push(*a, &|| g.mul_const(Rc::clone(m))),
            Powf(a, p) => push(*a, &|| g.mul(self.var(*a).powf(*p - T::one()).scale(*p))),
            Exp(a) => push(*a, &|| g.mul(this)),
            Tanh(a) => push(*a, &|| {
                g.mul(this.mul(this).scale(-T::one()).add_scalar(T::one()))
            }),
            LeakyRelu(a, s) => push(*a, &|| {
                let x = self.value(*a);
                g.mul_const(Rc::new(
                    x.map(|v| if v > T::zero() { T::one() } else { *s }),
                ))
            }),
            MaxConst(a, c) => push(*a, &|| {
                let x = self.value(*a);
                g.mul_const(Rc::new(
                    x.map(|v| if v > *c { T::one() } else { T::zero() }),
                ))
            }),
            Reshape(a) => push(*a, &|| g.reshape(self.value(*a).shape())),
            SumAll(a) => push(*a, &|| g.expand(self.value(*a).shape())),
            Expand(a) => push(*a, &|| g.sum()),
            RowSum(a) => push(*a, &|| g.row_expand(self.value(*a).shape())),
            RowExpand(a) => push(*a, &|| g.row_sum()),
            RowScale(a, s) => push(*a, &|| g.row_scale(Rc::clone(s))),
            ChannelSum(a) => push(*a, &|| g.channel_expand(self.value(*a).shape())),
            ChannelExpand(a) => push(*a, &|| g.channel_sum()),
            SpatialSum(a) => push(*a, &|| {
                let s = self.value(*a);
                g.spatial_expand(s.shape()[2], s.shape()[3])
            }),
            SpatialExpand(a) => push(*a, &|| g.spatial_sum()),
            MatMul(a, b, ta, tb) => {
                let (va, vb) = (self.var(*a), self.var(*b));
                let (ta, tb) = (*ta, *tb);
                push(*a, &|| {
                    if ta {
                        vb.matmul(g, tb, true)
                    } else {
                        g.matmul(vb, false, !tb)
                    }
                });
                push(*b, &|| {
                    if tb {
                        g.matmul(va, true, ta)
                    } else {
                        va.matmul(g, !ta, false)
                    }
                });
            }
            Conv(x, w, geo) => {
                push(*x, &|| conv_t_raw(g, self.var(*w), *geo));
                push(*w, &|| conv_w_raw(self.var(*x), g, *geo));
            }
            ConvT(u, w, geo) => {
                push(*u, &|| conv_raw(g, self.var(*w), *geo));
                push(*w, &|| conv_w_raw(g, self.var(*u), *geo));
            }
            ConvW(x, u, geo) => {
                push(*x, &|| conv_t_raw(self.var(*u), g, *geo));
                push(*u, &|| conv_raw(self.var(*x), g, *geo));
            }
            LogSumExp(a) => push(*a, &|| {
                let va = self.var(*a);
                let shape = self.value(*a).shape().to_vec();
                g.row_expand(&shape)
                    .mul(va.sub(this.row_expand(&shape)).exp())
            }),
            SliceCols(a, start) => push(*a, &|| g.pad_cols(*start, self.value(*a).shape()[1])),
            PadCols(a, start) => push(*a, &|| {
                g.slice_cols(*start, *start + self.value(*a).shape()[1])
            }),
            SliceRows(a, start) => push(*a, &|| g.pad_rows(*start, self.value(*a).rows())),
            PadRows(a, start) => push(*a, &|| g.slice_rows(*start, *start + self.value(*a).rows())),
            PickCols(a, idx) => push(*a, &|| {
                g.scatter_cols(Rc::clone(idx), self.value(*a).shape()[1])
            }),
            ScatterCols(a, idx) => push(*a, &|| g.pick_cols(Rc::clone(idx))),
        }
        out
    }
}

fn conv_raw<'g, T: Scalar>(x: Var<'g, T>, w: Var<'g, T>, geo: ConvGeom) -> Var<'g, T> {
    let xv = x.value();
    let n = xv.rows();
    let y = kernels::conv_forward(&geo, n, xv.data(), w.value().data());
    x.graph.op_node(
        Tensor::new(geo.y_shape(n), y).expect("conv shape"),
        Op::Conv(x.id, w.id, geo),
    )
}

fn conv_t_raw<'g, T: Scalar>(u: Var<'g, T>, w: Var<'g, T>, geo: ConvGeom) -> Var<'g, T> {
    let uv = u.value();
    let n = uv.rows();
    let x = kernels::conv_transpose(&geo, n, uv.data(), w.value().data());
    u.graph.op_node(
        Tensor::new(geo.x_shape(n), x).expect("convT shape"),
        Op::ConvT(u.id, w.id, geo),
    )
}

fn conv_w_raw<'g, T: Scalar>(x: Var<'g, T>, u: Var<'g, T>, geo: ConvGeom) -> Var<'g, T> {
    let xv = x.value();
    let n = xv.rows();
    let dw = kernels::conv_weight(&geo, n, xv.data(), u.value().data());
    x.graph.op_node(
        Tensor::new(geo.w_shape(), dw).expect("convW shape"),
        Op::ConvW(x.id, u.id, geo),
    )
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.op_node(value, op)
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.unary(v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.unary(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.unary(v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let v = self.value().map(|a| a * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let v = self.value().map(|a| a + c);
        self.unary(v, Op::AddScalar(self.id, c))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, m: Rc<Tensor<T>>) -> Var<'g, T> {
        let v = self.value().zip_map(&m, |a, b| a * b);
        self.unary(v, Op::MulConst(self.id, m))
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        let v = self.value().map(|a| a.powf(p));
        self.unary(v, Op::Powf(self.id, p))
    }

    pub fn exp(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn tanh(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let v = self
            .value()
            .map(|a| if a > T::zero() { a } else { a * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    /// `max(x, floor)` elementwise; gradient is zero where the floor is active.
    pub fn max_const(self, floor: T) -> Var<'g, T> {
        let v = self.value().map(|a| a.max(floor));
        self.unary(v, Op::MaxConst(self.id, floor))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let v = (*self.value()).clone().reshape(shape).expect("reshape");
        self.unary(v, Op::Reshape(self.id))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::of(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'g, T> {
        let v = Tensor::full(shape, self.value().item());
        self.unary(v, Op::Expand(self.id))
    }

    /// `[N, ...] -> [N]`.
    pub fn row_sum(self) -> Var<'g, T> {
        let x = self.value();
        let v = Tensor::from_fn(&[x.rows()], |i| x.row(i).iter().copied().sum());
        self.unary(v, Op::RowSum(self.id))
    }

    /// `[N] -> shape` with `shape[0] == N`.
    pub fn row_expand(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape(), &shape[..1], "row_expand");
        let w: usize = shape[1..].iter().product();
        let v = Tensor::from_fn(shape, |i| x.data()[i / w]);
        self.unary(v, Op::RowExpand(self.id))
    }

    /// Multiplies row `i` by the constant `s[i]`.
    pub fn row_scale(self, s: Rc<Vec<T>>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.rows(), s.len(), "row_scale");
        let w = x.row_len();
        let v = Tensor::from_fn(x.shape(), |i| x.data()[i] * s[i / w]);
        self.unary(v, Op::RowScale(self.id, s))
    }

    /// `[N, C, ...] -> [C]`.
    pub fn channel_sum(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = vec![T::zero(); c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let s = (b * c + ch) * inner;
                *o = *o + x.data()[s..s + inner].iter().copied().sum();
            }
        }
        self.unary(
            Tensor::new(vec![c], out).expect("channel_sum"),
            Op::ChannelSum(self.id),
        )
    }

    /// `[C] -> shape` with `shape[1] == C`.
    pub fn channel_expand(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape(), &shape[1..2], "channel_expand");
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let v = Tensor::from_fn(shape, |i| x.data()[(i / inner) % c]);
        self.unary(v, Op::ChannelExpand(self.id))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn spatial_sum(self) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape();
        let inner = s[2] * s[3];
        let v = Tensor::from_fn(&[s[0], s[1]], |i| {
            x.data()[i * inner..(i + 1) * inner].iter().copied().sum()
        });
        self.unary(v, Op::SpatialSum(self.id))
    }

    /// `[N, C] -> [N, C, h, w]`.
    pub fn spatial_expand(self, h: usize, w: usize) -> Var<'g, T> {
        let x = self.value();
        let s = x.shape();
        let v = Tensor::from_fn(&[s[0], s[1], h, w], |i| x.data()[i / (h * w)]);
        self.unary(v, Op::SpatialExpand(self.id))
    }

    /// Global average pooling, `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(self) -> Var<'g, T> {
        let s = self.shape();
        self.spatial_sum()
            .scale(T::one() / T::of((s[2] * s[3]) as f64))
    }

    /// `op(self) * op(other)` for 2-D operands, where `op` transposes when flagged.
    pub fn matmul(self, other: Var<'g, T>, ta: bool, tb: bool) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (ar, ac) = (a.shape()[0], a.shape()[1]);
        let (br, bc) = (b.shape()[0], b.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension");
        let (rsa, csa) = if ta {
            (1, ac as isize)
        } else {
            (ac as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, bc as isize)
        } else {
            (bc as isize, 1)
        };
        let mut c = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data(),
            rsa,
            csa,
            b.data(),
            rsb,
            csb,
            T::zero(),
            &mut c,
            n as isize,
            1,
        );
        self.unary(
            Tensor::new(vec![m, n], c).expect("matmul"),
            Op::MatMul(self.id, other.id, ta, tb),
        )
    }

    /// 2-D convolution of `[N, Cin, H, W]` with `[Cout, Cin, k, k]` filters.
    pub fn conv2d(self, w: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let (x, ws) = (self.shape(), w.shape());
        assert_eq!(x[1], ws[1], "conv2d input channels");
        let geo = ConvGeom::forward(ws[1], ws[0], ws[2], stride, pad, x[2], x[3]);
        conv_raw(self, w, geo)
    }

    /// Transposed convolution of `[N, Cin, h, w]` with `[Cin, Cout, k, k]`
    /// filters, producing `[N, Cout, (h-1)s+k-2p, ...]`.
    pub fn conv_transpose2d(self, w: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let (x, ws) = (self.shape(), w.shape());
        assert_eq!(x[1], ws[0], "conv_transpose2d input channels");
        let geo = ConvGeom::transposed(ws[0], ws[1], ws[2], stride, pad, x[2], x[3]);
        conv_t_raw(self, w, geo)
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_bias(self, b: Var<'g, T>) -> Var<'g, T> {
        let shape = self.shape();
        self.add(b.channel_expand(&shape))
    }

    /// Row-wise log-sum-exp of `[N, K]`, max-shifted.
    pub fn logsumexp_rows(self) -> Var<'g, T> {
        let x = self.value();
        let v = Tensor::from_fn(&[x.rows()], |i| {
            let r = x.row(i);
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() {
                return m;
            }
            m + r.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
        });
        self.unary(v, Op::LogSumExp(self.id))
    }

    pub fn log_softmax_rows(self) -> Var<'g, T> {
        let shape = self.shape();
        self.sub(self.logsumexp_rows().row_expand(&shape))
    }

    /// Columns `start..end` of a `[N, K]` tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, k) = (x.rows(), x.shape()[1]);
        assert!(start <= end && end <= k, "slice_cols");
        let w = end - start;
        let v = Tensor::from_fn(&[n, w], |i| x.data()[(i / w) * k + start + i % w]);
        self.unary(v, Op::SliceCols(self.id, start))
    }

    /// Zero-pads `[N, w]` into `[N, total]` at column offset `start`.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, w) = (x.rows(), x.shape()[1]);
        let mut v = Tensor::zeros(&[n, total]);
        for i in 0..n {
            v.data_mut()[i * total + start..i * total + start + w].copy_from_slice(x.row(i));
        }
        self.unary(v, Op::PadCols(self.id, start))
    }

    /// Leading-dimension rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g, T> {
        let x = self.value();
        let idx: Vec<usize> = (start..end).collect();
        let v = x.select_rows(&idx);
        self.unary(v, Op::SliceRows(self.id, start))
    }

    /// Zero-pads along the leading dimension to `total` rows.
    pub fn pad_rows(self, start: usize, total: usize) -> Var<'g, T> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        shape[0] = total;
        let mut v = Tensor::zeros(&shape);
        let w = x.row_len();
        v.data_mut()[start * w..start * w + x.len()].copy_from_slice(x.data());
        self.unary(v, Op::PadRows(self.id, start))
    }

    /// Picks column `idx[i]` from row `i`: `[N, K] -> [N]`.
    pub fn pick_cols(self, idx: Rc<Vec<usize>>) -> Var<'g, T> {
        let x = self.value();
        let k = x.shape()[1];
        assert_eq!(x.rows(), idx.len(), "pick_cols");
        let v = Tensor::from_fn(&[x.rows()], |i| x.data()[i * k + idx[i]]);
        self.unary(v, Op::PickCols(self.id, idx))
    }

    /// Adjoint of [`Var::pick_cols`]: `[N] -> [N, k]`.
    pub fn scatter_cols(self, idx: Rc<Vec<usize>>, k: usize) -> Var<'g, T> {
        let x = self.value();
        let mut v = Tensor::zeros(&[x.rows(), k]);
        for (i, &j) in idx.iter().enumerate() {
            v.data_mut()[i * k + j] = x.data()[i];
        }
        self.unary(v, Op::ScatterCols(self.id, idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = 1.0f64.max(x.abs()).max(y.abs());
            assert!((x - y).abs() <= tol * scale, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn product_rule() {
        let g = Graph::new();
        let a = g.leaf(t(&[2], &[2.0, -3.0]));
        let b = g.leaf(t(&[2], &[5.0, 7.0]));
        let y = a.mul(b).sum();
        let grads = g.grad(y, &[a, b], false);
        assert_eq!(grads[0].unwrap().value().data(), &[5.0, 7.0]);
        assert_eq!(grads[1].unwrap().value().data(), &[2.0, -3.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let g = Graph::new();
        let x = g.leaf(t(&[1], &[1.5]));
        let y = x.powf(3.0).sum();
        let dy = g.grad(y, &[x], true)[0].unwrap();
        assert!((dy.value().item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let d2 = g.grad(dy.sum(), &[x], false)[0].unwrap();
        assert!((d2.value().item() - 6.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn unrelated_input_has_no_gradient() {
        let g = Graph::new();
        let a = g.leaf(t(&[1], &[1.0]));
        let b = g.leaf(t(&[1], &[2.0]));
        let y = a.scale(3.0).sum();
        let grads = g.grad(y, &[a, b], false);
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let a0 = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b0 = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.91).cos());
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let shape_a = if ta { vec![4, 3] } else { vec![3, 4] };
            let shape_b = if tb { vec![3, 4] } else { vec![4, 3] };
            let a = a0.clone().reshape(&shape_a).unwrap();
            let b = b0.clone().reshape(&shape_b).unwrap();
            let w = Tensor::from_fn(&[3, 3], |i| i as f64 - 4.0);
            let f = |a: &Tensor<f64>, b: &Tensor<f64>| {
                let g = Graph::new();
                let y = g.leaf(a.clone()).matmul(g.leaf(b.clone()), ta, tb);
                y.mul(g.constant(w.clone())).sum().value().item()
            };
            let g = Graph::new();
            let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let y = va.matmul(vb, ta, tb).mul(g.constant(w.clone())).sum();
            let grads = g.grad(y, &[va, vb], false);
            assert_close(
                grads[0].unwrap().value().data(),
                &numeric_grad(&a, &|p| f(p, &b)),
                1e-6,
            );
            assert_close(
                grads[1].unwrap().value().data(),
                &numeric_grad(&b, &|p| f(&a, p)),
                1e-6,
            );
        }
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let x0 = Tensor::from_fn(&[2, 2, 5, 5], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1);
        let w0 = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5 % 13) as f64 - 6.0) * 0.05);
        let wt0 = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 3 % 7) as f64 - 3.0) * 0.04);
        let build = |x: &Tensor<f64>, w: &Tensor<f64>, wt: &Tensor<f64>| {
            let g = Graph::new();
            let h = g.leaf(x.clone()).conv2d(g.leaf(w.clone()), 2, 1).tanh();
            let up = h.conv_transpose2d(g.leaf(wt.clone()), 2, 1);
            up.mul(up).spatial_mean().sum().value().item()
        };
        let g = Graph::new();
        let (x, w, wt) = (g.leaf(x0.clone()), g.leaf(w0.clone()), g.leaf(wt0.clone()));
        let h = x.conv2d(w, 2, 1).tanh();
        let up = h.conv_transpose2d(wt, 2, 1);
        let y = up.mul(up).spatial_mean().sum();
        let grads = g.grad(y, &[x, w, wt], false);
        let fx = |p: &Tensor<f64>| build(p, &w0, &wt0);
        let fw = |p: &Tensor<f64>| build(&x0, p, &wt0);
        let fwt = |p: &Tensor<f64>| build(&x0, &w0, p);
        assert_close(
            grads[0].unwrap().value().data(),
            &numeric_grad(&x0, &fx),
            1e-6,
        );
        assert_close(
            grads[1].unwrap().value().data(),
            &numeric_grad(&w0, &fw),
            1e-6,
        );
        assert_close(
            grads[2].unwrap().value().data(),
            &numeric_grad(&wt0, &fwt),
            1e-6,
        );
    }

    #[test]
    fn double_backward_through_conv_matches_finite_differences() {
        // d/dw of ||d/dx sum(tanh(conv(x, w)))||^2
        let x0 = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64 * 0.3).sin());
        let w0 = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.7).cos() * 0.4);
        let penalty = |w: &Tensor<f64>| {
            let g = Graph::new();
            let x = g.leaf(x0.clone());
            let y = x
                .conv2d(g.leaf(w.clone()), 1, 1)
                .leaky_relu(0.2)
                .tanh()
                .sum();
            let gx = g.grad(y, &[x], true)[0].unwrap();
            gx.mul(gx).sum().value().item()
        };
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w0.clone());
        let y = x.conv2d(w, 1, 1).leaky_relu(0.2).tanh().sum();
        let gx = g.grad(y, &[x], true)[0].unwrap();
        let p = gx.mul(gx).sum();
        let gw = g.grad(p, &[w], false)[0].unwrap();
        assert_close(gw.value().data(), &numeric_grad(&w0, &penalty), 1e-6);
    }

    #[test]
    fn logsumexp_and_index_ops() {
        let x0 = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -2.0]);
        let f = |x: &Tensor<f64>| {
            let g = Graph::new();
            let v = g.leaf(x.clone());
            let ls = v.log_softmax_rows();
            let picked = ls.pick_cols(Rc::new(vec![2, 0]));
            let tail = v.slice_cols(0, 2).logsumexp_rows();
            picked
                .add(tail)
                .row_scale(Rc::new(vec![0.3, 1.7]))
                .sum()
                .value()
                .item()
        };
        let g = Graph::new();
        let v = g.leaf(x0.clone());
        let ls = v.log_softmax_rows();
        let picked = ls.pick_cols(Rc::new(vec![2, 0]));
        let tail = v.slice_cols(0, 2).logsumexp_rows();
        let y = picked.add(tail).row_scale(Rc::new(vec![0.3, 1.7])).sum();
        let gx = g.grad(y, &[v], false)[0].unwrap();
        assert_close(gx.value().data(), &numeric_grad(&x0, &f), 1e-6);
    }

    #[test]
    fn row_and_channel_adjoint_pairs() {
        let x0 = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.13).sin());
        let f = |x: &Tensor<f64>| {
            let g = Graph::new();
            let v = g.leaf(x.clone());
            let c = v.channel_sum().powf(2.0).sum();
            let r = v.row_sum().powf(2.0).sum();
            let s = v.slice_rows(1, 2).pad_rows(0, 2).mul(v).sum();
            c.add(r).add(s).value().item()
        };
        let g = Graph::new();
        let v = g.leaf(x0.clone());
        let c = v.channel_sum().powf(2.0).sum();
        let r = v.row_sum().powf(2.0).sum();
        let s = v.slice_rows(1, 2).pad_rows(0, 2).mul(v).sum();
        let y = c.add(r).add(s);
        let gx = g.grad(y, &[v], false)[0].unwrap();
        assert_close(gx.value().data(), &numeric_grad(&x0, &f), 1e-6);
    }
}
