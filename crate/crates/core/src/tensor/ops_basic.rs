//! Element-wise, reduction, matrix and layout primitives.

use super::array::{numel, Tensor};
use super::graph::{reverse_axis, stable_sigmoid, Graph, Op, Var};
use super::rng::RngStream;
use super::scalar::Real;
use super::TensorError;

/// Maps a flat index of the broadcast output to a flat index of one operand.
enum Bcast {
    Same,
    Modulo(usize),
    Table(Vec<usize>),
}

impl Bcast {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        if in_shape == out_shape {
            return Bcast::Same;
        }
        let trimmed: &[usize] = {
            let lead = in_shape.iter().take_while(|&&d| d == 1).count();
            &in_shape[lead.min(in_shape.len().saturating_sub(1))..]
        };
        if out_shape.ends_with(trimmed) {
            return Bcast::Modulo(numel(trimmed));
        }
        let rank = out_shape.len();
        let pad = rank - in_shape.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..in_shape.len()).rev() {
            strides[pad + d] = if in_shape[d] == 1 { 0 } else { acc };
            acc *= in_shape[d];
        }
        Bcast::Table(strided_offsets(out_shape, &strides))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Modulo(n) => i % n,
            Bcast::Table(t) => t[i],
        }
    }
}

/// For every flat index of `shape` (row-major), the offset `sum(index[d] * strides[d])`.
pub(crate) fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let x = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let y = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(TensorError::Shape {
                op,
                expected: a.to_vec(),
                found: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn unbroadcast<F: Real>(g: &Tensor<F>, target: &[usize], scale: impl Fn(usize, F) -> F) -> Tensor<F> {
    let map = Bcast::new(target, g.shape());
    let mut out = vec![F::zero(); numel(target)];
    for (i, &gv) in g.data().iter().enumerate() {
        let j = map.at(i);
        out[j] = out[j] + scale(i, gv);
    }
    Tensor::from_parts(target.to_vec(), out)
}

impl<F: Real> Graph<F> {
    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, bool), TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let ma = Bcast::new(&sa, &out_shape);
        let mb = Bcast::new(&sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..numel(&out_shape))
            .map(|i| f(da[ma.at(i)], db[mb.at(i)]))
            .collect();
        Ok((Tensor::from_parts(out_shape, data), self.any_grad(&[a, b])))
    }

    /// Broadcasting addition (numpy rules, trailing axes aligned).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Broadcasting element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64_lossy(c);
        let t = self.value(a).map(|v| v * c);
        let rg = self.requires_grad(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::from_f64_lossy(c);
        let t = self.value(a).map(|v| v + c);
        let rg = self.requires_grad(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `1 - a`, the complement used by binary cross-entropy terms.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                expected: sa.to_vec(),
                found: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, F::zero(), &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), stable_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |v| v.tanh())
    }

    /// `log(1 + e^x)` evaluated as `max(x, 0) + log(1 + e^-|x|)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus_scalar)
    }

    /// Natural log; inputs must be positive (callers clamp first).
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |v| v.ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |v| v.exp())
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (F::from_f64_lossy(lo), F::from_f64_lossy(hi));
        self.unary(a, Op::Clamp(a, lo, hi), move |v| v.max(lo).min(hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.requires_grad(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.requires_grad(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes).expect("all axes are valid")
    }

    /// Mean over the given axes, which are removed from the output shape.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(TensorError::Axis {
                op: "mean",
                axis: *axes.iter().max().unwrap(),
                rank: shape.len(),
            });
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = if keep.is_empty() {
            vec![1]
        } else {
            keep.iter().map(|&d| shape[d]).collect()
        };
        let mut strides = vec![0usize; shape.len()];
        let mut acc = 1;
        for &d in keep.iter().rev() {
            strides[d] = acc;
            acc *= shape[d];
        }
        let out_offsets = strided_offsets(&shape, &strides);
        let count = numel(&shape) / numel(&out_shape);
        let mut out = vec![F::zero(); numel(&out_shape)];
        for (&o, &v) in out_offsets.iter().zip(self.value(a).data()) {
            out[o] = out[o] + v;
        }
        let inv = F::one() / F::from_usize(count).unwrap();
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxes {
                input: a,
                out_offsets: if rg { out_offsets } else { Vec::new() },
                count,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    expected: first.clone(),
                    found: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Range {
                op: "slice",
                start,
                len,
                extent: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Reverses the order of entries along `axis` (time reversal for recurrences).
    pub fn reverse(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(TensorError::Axis {
                op: "reverse",
                axis,
                rank,
            });
        }
        let t = reverse_axis(self.value(a), axis);
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reverse { input: a, axis }, rg))
    }

    /// Inverted dropout: keeps each entry with probability `keep` and scales kept
    /// entries by `1 / keep`. Identity when `keep >= 1`.
    pub fn dropout(&mut self, a: Var, keep: f64, rng: &mut RngStream) -> Result<Var, TensorError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::Domain {
                op: "dropout",
                detail: format!("keep probability {keep} outside (0, 1]"),
            });
        }
        if keep >= 1.0 {
            return Ok(a);
        }
        let scale = F::from_f64_lossy(1.0 / keep);
        let mask: Vec<F> = (0..self.value(a).len())
            .map(|_| if rng.bernoulli(keep) { scale } else { F::zero() })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Dropout { input: a, mask }, rg))
    }

    pub(crate) fn backward_add(&self, a: Var, b: Var, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>], sign_b: F) {
        if self.requires_grad(a) {
            let d = unbroadcast(g, self.shape(a), |_, v| v);
            self.accum(grads, a, d);
        }
        if self.requires_grad(b) {
            let d = unbroadcast(g, self.shape(b), |_, v| v * sign_b);
            self.accum(grads, b, d);
        }
    }

    pub(crate) fn backward_mul(&self, a: Var, b: Var, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out_shape = g.shape();
        if self.requires_grad(a) {
            let mb = Bcast::new(self.shape(b), out_shape);
            let db = self.value(b).data();
            let d = unbroadcast(g, self.shape(a), |i, v| v * db[mb.at(i)]);
            self.accum(grads, a, d);
        }
        if self.requires_grad(b) {
            let ma = Bcast::new(self.shape(a), out_shape);
            let da = self.value(a).data();
            let d = unbroadcast(g, self.shape(b), |i, v| v * da[ma.at(i)]);
            self.accum(grads, b, d);
        }
    }

    pub(crate) fn backward_matmul(&self, a: Var, b: Var, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        if self.requires_grad(a) {
            let mut d = vec![F::zero(); m * k];
            F::gemm(m, n, k, g.data(), false, self.value(b).data(), true, F::zero(), &mut d);
            self.accum(grads, a, Tensor::from_parts(vec![m, k], d));
        }
        if self.requires_grad(b) {
            let mut d = vec![F::zero(); k * n];
            F::gemm(k, m, n, self.value(a).data(), true, g.data(), false, F::zero(), &mut d);
            self.accum(grads, b, Tensor::from_parts(vec![k, n], d));
        }
    }

    pub(crate) fn backward_softmax(&self, a: Var, y: &Tensor<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let n = *y.shape().last().unwrap();
        let mut d = vec![F::zero(); y.len()];
        for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
            let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
            for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *dv = yv * (gv - dot);
            }
        }
        self.accum(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
    }

    pub(crate) fn backward_log_softmax(&self, a: Var, y: &Tensor<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let n = *y.shape().last().unwrap();
        let mut d = vec![F::zero(); y.len()];
        for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
            let s: F = gr.iter().copied().sum();
            for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *dv = gv - yv.exp() * s;
            }
        }
        self.accum(grads, a, Tensor::from_parts(y.shape().to_vec(), d));
    }

    pub(crate) fn backward_concat(&self, inputs: &[Var], axis: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let shape = g.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis] * inner;
            if self.requires_grad(v) {
                let mut d = Vec::with_capacity(outer * len);
                for o in 0..outer {
                    let base = o * row + offset;
                    d.extend_from_slice(&g.data()[base..base + len]);
                }
                self.accum(grads, v, Tensor::from_parts(self.shape(v).to_vec(), d));
            }
            offset += len;
        }
    }

    pub(crate) fn backward_slice(&self, a: Var, axis: usize, start: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let shape = self.shape(a).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = g.shape()[axis];
        let mut d = vec![F::zero(); numel(&shape)];
        for o in 0..outer {
            let dst = (o * shape[axis] + start) * inner;
            let src = o * len * inner;
            d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
        }
        self.accum(grads, a, Tensor::from_parts(shape, d));
    }
}

pub(crate) fn softplus_scalar<F: Real>(v: F) -> F {
    v.max(F::zero()) + (-v.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(grads.wrt(x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[1], &[0.0]));
        let s = g.sigmoid(w);
        let grads = g.backward(s).unwrap();
        assert!((grads.wrt(w).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_on_non_scalar_fails() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(&[2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn broadcast_bias_and_column() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.input(t(&[3], &[10.0, 20.0, 30.0]));
        let c = g.input(t(&[2, 1], &[100.0, 200.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let z = g.mul(x, c).unwrap();
        assert_eq!(g.value(z).data(), &[100.0, 200.0, 300.0, 800.0, 1000.0, 1200.0]);
    }

    #[test]
    fn incompatible_broadcast_names_op() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let y = g.input(Tensor::zeros(&[4]));
        match g.add(x, y) {
            Err(TensorError::Shape { op, expected, found }) => {
                assert_eq!(op, "add");
                assert_eq!(expected, vec![2, 3]);
                assert_eq!(found, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mean_over_middle_axes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 2, 2, 3], |i| i as f64));
        let m = g.mean(x, &[1, 2]).unwrap();
        assert_eq!(g.shape(m), &[2, 3]);
        // entries of batch 0, channel 0: 0, 3, 6, 9
        assert_eq!(g.value(m).get(&[0, 0]), 4.5);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        let s = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(s).data(), g.value(b).data());
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[5], |i| i as f64));
        let mut rng = RngStream::new(1, 1);
        let y = g.dropout(x, 1.0, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn inverted_dropout_preserves_scale() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::ones(&[20000]));
        let mut rng = RngStream::new(3, 0);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let mean = g.value(y).sum() / 20000.0;
        assert!((mean - 1.0).abs() < 0.03);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
