//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in forward execution order. Values
//! live on the tape; [`Var`] is a cheap handle into it. Calling
//! [`Tape::backward`] walks the tape in reverse and returns a fresh
//! [`Gradients`] map. The tape itself is never mutated by `backward`, so
//! calling it twice yields identical gradients.
//!
//! The primitive set is closed (see [`Primitive`]). Every model computation
//! is expressed in these primitives, which keeps the gradient-check surface
//! finite.

mod backward;
mod check;
pub(crate) mod kernels;

use thiserror::Error;

pub use backward::Gradients;
pub use check::{grad_check, grad_check_coords, relative_error};
pub use kernels::PatchGeom;

use crate::tensor::{numel, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite function value {value} at coordinate {coord:?}")]
    NonFinite { value: f64, coord: Option<usize> },
}

pub type Result<T, E = TapeError> = std::result::Result<T, E>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    BroadcastAdd,
    Scale,
    Elu,
    Tanh,
    Sigmoid,
    Exp,
    Square,
    Sin,
    Cos,
    Recip,
    Sum,
    Mean,
    Concat,
    Slice,
    Reshape,
    BilinearSample,
    Patches,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Elu,
    Tanh,
    Sigmoid,
    Exp,
    Square,
    Sin,
    Cos,
    Recip,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatDims {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, dims: MatDims },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize, len: usize },
    Reshape(Var),
    BilinearSample { image: Var, xs: Var, ys: Var },
    Patches { input: Var, geom: PatchGeom },
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TapeError {
    TapeError::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient-tracked leaf.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// The primitive that produced `v`, or `None` for leaves.
    pub fn primitive(&self, v: Var) -> Option<Primitive> {
        Some(match &self.nodes[v.0].op {
            Op::Leaf => return None,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::BroadcastAdd(..) => Primitive::BroadcastAdd,
            Op::Scale(..) => Primitive::Scale,
            Op::Unary(_, u) => match u {
                Unary::Elu => Primitive::Elu,
                Unary::Tanh => Primitive::Tanh,
                Unary::Sigmoid => Primitive::Sigmoid,
                Unary::Exp => Primitive::Exp,
                Unary::Square => Primitive::Square,
                Unary::Sin => Primitive::Sin,
                Unary::Cos => Primitive::Cos,
                Unary::Recip => Primitive::Recip,
            },
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
            Op::Concat(_) => Primitive::Concat,
            Op::Slice { .. } => Primitive::Slice,
            Op::Reshape(_) => Primitive::Reshape,
            Op::BilinearSample { .. } => Primitive::BilinearSample,
            Op::Patches { .. } => Primitive::Patches,
        })
    }

    /// Direct inputs of `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::BroadcastAdd(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Unary(a, _) | Op::Sum(a) | Op::Mean(a) | Op::Reshape(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::BilinearSample { image, xs, ys } => vec![*image, *xs, *ys],
            Op::Patches { input, .. } => vec![*input],
        }
    }

    pub(crate) fn node(&self, i: usize) -> &Node<T> {
        &self.nodes[i]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("primitive produced a consistent tensor");
        self.push(value, op, requires_grad)
    }

    /// Matrix product. Accepts `[n,k]·[k,m]`, `[B,n,k]·[B,k,m]`, and mixed
    /// forms where the 2-d operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || shape_err("matmul", &[sa, sb]);
        let (a_batch, n, k) = match *sa {
            [n, k] => (None, n, k),
            [bt, n, k] => (Some(bt), n, k),
            _ => return Err(err()),
        };
        let (b_batch, k2, m) = match *sb {
            [k, m] => (None, k, m),
            [bt, k, m] => (Some(bt), k, m),
            _ => return Err(err()),
        };
        if k != k2 {
            return Err(err());
        }
        let batch = match (a_batch, b_batch) {
            (Some(x), Some(y)) if x != y => return Err(err()),
            (Some(x), _) | (_, Some(x)) => x,
            (None, None) => 1,
        };
        let dims = MatDims { batch, n, k, m, a_batched: a_batch.is_some(), b_batched: b_batch.is_some() };
        let shape = if a_batch.is_some() || b_batch.is_some() { vec![batch, n, m] } else { vec![n, m] };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * n * m];
        if !dims.b_batched {
            // Shared right operand: one tall product.
            kernels::gemm(batch * n, k, m, av, bv, &mut out);
        } else {
            for bi in 0..batch {
                let ao = if dims.a_batched { bi * n * k } else { 0 };
                let bo = bi * k * m;
                kernels::gemm(n, k, m, &av[ao..ao + n * k], &bv[bo..bo + k * m], &mut out[bi * n * m..(bi + 1) * n * m]);
            }
        }
        Ok(self.derived(shape, out, Op::MatMul { a, b, dims }, &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, &[sa, sb]));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((sa.to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.derived(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.derived(shape, data, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.derived(shape, data, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b` is a single value or its shape is a trailing
    /// suffix of `a`'s shape.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner = self.value(b).len();
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !(inner == 1 || suffix_ok) {
            return Err(shape_err("broadcast_add", &[sa, sb]));
        }
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.derived(shape, data, Op::BroadcastAdd(a, b), &[a, b]))
    }

    /// `a + c` for a constant scalar `c`, as a broadcast add of a constant.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(Tensor::scalar(T::of(c)));
        self.broadcast_add(a, k).expect("scalar broadcast always fits")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        self.derived(shape, data, Op::Scale(a, c), &[a])
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let shape = self.shape(a).to_vec();
        let f: fn(T) -> T = match u {
            Unary::Elu => |x| if x > T::zero() { x } else { x.exp_m1() },
            Unary::Tanh => |x| x.tanh(),
            Unary::Sigmoid => |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Unary::Exp => |x| x.exp(),
            Unary::Square => |x| x * x,
            Unary::Sin => |x| x.sin(),
            Unary::Cos => |x| x.cos(),
            Unary::Recip => |x| x.recip(),
        };
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.derived(shape, data, Op::Unary(a, u), &[a])
    }

    /// Exponential linear unit with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.derived(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.derived(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TapeError::Empty("concat"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let outer = numel(lead);
        let mut last = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != *lead {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(shape_err("concat", &shapes));
            }
            last += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(outer * last);
        for o in 0..outer {
            for &p in parts {
                let w = *self.shape(p).last().unwrap();
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(last);
        Ok(self.derived(shape, data, Op::Concat(parts.to_vec()), parts))
    }

    /// `a[..., start..start+len]` along the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        let w = *s.last().unwrap();
        if len == 0 || start + len > w {
            return Err(TapeError::Shape { op: "slice", shapes: vec![s.to_vec(), vec![start, start + len]] });
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let data = self.value(a).data().chunks(w).flat_map(|row| row[start..start + len].iter().copied()).collect();
        Ok(self.derived(shape, data, Op::Slice { input: a, start, len }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if shape.is_empty() || shape.contains(&0) || numel(shape) != numel(s) {
            return Err(shape_err("reshape", &[s, shape]));
        }
        let data = self.value(a).data().to_vec();
        Ok(self.derived(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    /// Samples `image` (`[B,H,W]`) bilinearly at normalized coordinates
    /// `xs`, `ys` (`[B, out_h*out_w]`, x along width). Coordinates follow
    /// the align-corners-false convention: pixel `i` of `N` has center
    /// `(2i+1)/N − 1`. Points outside the source read zeros.
    pub fn bilinear_sample(&mut self, image: Var, xs: Var, ys: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (si, sx, sy) = (self.shape(image), self.shape(xs), self.shape(ys));
        let ok = si.len() == 3 && sx == [si[0], out_h * out_w] && sy == sx;
        if !ok {
            return Err(shape_err("bilinear_sample", &[si, sx, sy]));
        }
        let (b, h, w) = (si[0], si[1], si[2]);
        let data = kernels::bilinear_forward(
            self.value(image).data(),
            h,
            w,
            self.value(xs).data(),
            self.value(ys).data(),
            out_h * out_w,
        );
        Ok(self.derived(vec![b, out_h, out_w], data, Op::BilinearSample { image, xs, ys }, &[image, xs, ys]))
    }

    /// Extracts `kernel×kernel` neighbourhoods from a channels-last
    /// `[B,H,W,C]` input (im2col), producing `[B,Ho,Wo,kernel²·C]` with zero
    /// padding. A convolution is this followed by a matmul.
    pub fn patches(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(input);
        let geom = PatchGeom::new(s, kernel, stride, pad)
            .ok_or_else(|| shape_err("patches", &[s, &[kernel, stride, pad]]))?;
        let data = kernels::patches_forward(&geom, self.value(input).data());
        Ok(self.derived(geom.out_shape(), data, Op::Patches { input, geom }, &[input]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        backward::run(self, loss)
    }
}
