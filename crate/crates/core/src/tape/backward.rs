use super::kernels::{self, BilinearGrads};
use super::{Op, Result, Tape, TapeError, Unary, Var};
use crate::tensor::{Real, Tensor};

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Raw gradient of `v`, `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` is off the loss path.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.index()].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.index()].get_or_insert_with(|| vec![T::zero(); len])
}

pub(super) fn run<T: Real>(tape: &Tape<T>, loss: Var) -> Result<Gradients<T>> {
    let shape = tape.shape(loss);
    if tape.value(loss).len() != 1 {
        return Err(TapeError::NonScalarLoss(shape.to_vec()));
    }
    let n = loss.index() + 1;
    let mut grads: Vec<Option<Vec<T>>> = vec![None; tape.len()];
    grads[loss.index()] = Some(vec![T::one()]);
    let floor = T::min_positive_value() * T::of(1e8);
    for i in (0..n).rev() {
        let node = tape.node(i);
        if !node.requires_grad {
            continue;
        }
        let Some(mut g) = grads[i].take() else { continue };
        // Products of near-underflow gradients go subnormal, which is orders
        // of magnitude slower and carries no usable signal.
        for v in g.iter_mut().filter(|v| v.abs() < floor) {
            *v = T::zero();
        }
        propagate(tape, i, &g, &mut grads);
        grads[i] = Some(g);
    }
    let shapes = (0..tape.len()).map(|i| tape.node(i).value.shape().to_vec()).collect();
    Ok(Gradients { grads, shapes })
}

fn propagate<T: Real>(tape: &Tape<T>, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = tape.node(i);
    let val = |v: Var| tape.value(v).data();
    let len = |v: Var| tape.value(v).len();
    let wants = |v: Var| tape.requires_grad(v);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, dims } => {
            let (bt, n, k, m) = (dims.batch, dims.n, dims.k, dims.m);
            let (av, bv) = (val(*a), val(*b));
            if !dims.b_batched {
                if wants(*a) {
                    // bt == 1 whenever neither operand is batched.
                    let ga = slot(grads, *a, len(*a));
                    kernels::gemm_nt(bt * n, k, m, g, bv, ga);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, len(*b));
                    kernels::gemm_tn(bt * n, k, m, av, g, gb);
                }
            } else {
                for bi in 0..bt {
                    let ao = if dims.a_batched { bi * n * k } else { 0 };
                    let bo = bi * k * m;
                    let go = &g[bi * n * m..(bi + 1) * n * m];
                    if wants(*a) {
                        let ga = slot(grads, *a, len(*a));
                        kernels::gemm_nt(n, k, m, go, &bv[bo..bo + k * m], &mut ga[ao..ao + n * k]);
                    }
                    if wants(*b) {
                        let gb = slot(grads, *b, len(*b));
                        kernels::gemm_tn(n, k, m, &av[ao..ao + n * k], go, &mut gb[bo..bo + k * m]);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(v) {
                    slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if wants(*b) {
                slot(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bv = val(*b);
                let ga = slot(grads, *a, g.len());
                for ((d, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += x * y;
                }
            }
            if wants(*b) {
                let av = val(*a);
                let gb = slot(grads, *b, g.len());
                for ((d, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                    *d += x * y;
                }
            }
        }
        Op::BroadcastAdd(a, b) => {
            if wants(*a) {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if wants(*b) {
                let inner = len(*b);
                let gb = slot(grads, *b, inner);
                for row in g.chunks(inner) {
                    for (d, &x) in gb.iter_mut().zip(row) {
                        *d += x;
                    }
                }
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c);
            }
        }
        Op::Unary(a, u) => {
            if wants(*a) {
                let x = val(*a);
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    let local = match u {
                        Unary::Elu => {
                            if x[j] > T::zero() {
                                T::one()
                            } else {
                                y[j] + T::one()
                            }
                        }
                        Unary::Tanh => T::one() - y[j] * y[j],
                        Unary::Sigmoid => y[j] * (T::one() - y[j]),
                        Unary::Exp => y[j],
                        Unary::Square => T::of(2.0) * x[j],
                        Unary::Sin => x[j].cos(),
                        Unary::Cos => -x[j].sin(),
                        Unary::Recip => -y[j] * y[j],
                    };
                    ga[j] += g[j] * local;
                }
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                slot(grads, *a, len(*a)).iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if wants(*a) {
                let scale = g[0] / T::of(len(*a) as f64);
                slot(grads, *a, len(*a)).iter_mut().for_each(|d| *d += scale);
            }
        }
        Op::Concat(parts) => {
            let total = *node.value.shape().last().unwrap();
            let outer = g.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = *tape.shape(p).last().unwrap();
                if wants(p) {
                    let gp = slot(grads, p, outer * w);
                    for o in 0..outer {
                        for (d, &x) in gp[o * w..(o + 1) * w].iter_mut().zip(&g[o * total + offset..o * total + offset + w]) {
                            *d += x;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Slice { input, start, len: width } => {
            if wants(*input) {
                let full = *tape.shape(*input).last().unwrap();
                let gi = slot(grads, *input, len(*input));
                for (o, row) in g.chunks(*width).enumerate() {
                    for (d, &x) in gi[o * full + start..o * full + start + width].iter_mut().zip(row) {
                        *d += x;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::BilinearSample { image, xs, ys } => {
            let s = tape.shape(*image);
            let (h, w) = (s[1], s[2]);
            let points = node.value.shape()[1] * node.value.shape()[2];
            // Pull each target buffer out so the three can be borrowed at once.
            let mut take = |v: Var| {
                if wants(v) {
                    Some(grads[v.index()].take().unwrap_or_else(|| vec![T::zero(); len(v)]))
                } else {
                    None
                }
            };
            let mut gi = take(*image);
            let mut gx = take(*xs);
            let mut gy = take(*ys);
            kernels::bilinear_backward(
                val(*image),
                h,
                w,
                val(*xs),
                val(*ys),
                points,
                g,
                BilinearGrads { image: gi.as_deref_mut(), xs: gx.as_deref_mut(), ys: gy.as_deref_mut() },
            );
            for (v, buf) in [(*image, gi), (*xs, gx), (*ys, gy)] {
                if let Some(buf) = buf {
                    match &mut grads[v.index()] {
                        // Same Var passed twice: merge the second buffer in.
                        Some(existing) => existing.iter_mut().zip(&buf).for_each(|(d, &x)| *d += x),
                        empty => *empty = Some(buf),
                    }
                }
            }
        }
        Op::Patches { input, geom } => {
            if wants(*input) {
                let gi = slot(grads, *input, len(*input));
                kernels::patches_backward(geom, g, gi);
            }
        }
    }
}
