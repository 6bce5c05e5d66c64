use super::array::Tensor;
use super::ops_conv::ConvGeom;
use super::ops_rnn::{GruSaved, LstmSaved};
use super::param::{ParamId, ParamStore};
use super::scalar::Real;
use super::TensorError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, F, F),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    MeanAxes {
        input: Var,
        out_offsets: Vec<usize>,
        count: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reverse {
        input: Var,
        axis: usize,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GruCell {
        gi: Var,
        h: Var,
        w_hh: Var,
        b_hh: Var,
        saved: GruSaved<F>,
    },
    LstmCell {
        gi: Var,
        hc: Var,
        w_hh: Var,
        b_hh: Var,
        saved: LstmSaved<F>,
    },
    Dropout {
        input: Var,
        mask: Vec<F>,
    },
}

impl<F> Op<F> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::MeanAxes { .. } => "mean",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reverse { .. } => "reverse",
            Op::Conv { .. } => "conv",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GruCell { .. } => "gru_cell",
            Op::LstmCell { .. } => "lstm_cell",
            Op::Dropout { .. } => "dropout",
        }
    }
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
    pub(crate) label: Option<String>,
}

/// Recording graph for one forward/backward step.
///
/// Every op evaluates eagerly and, when any input requires a gradient, keeps
/// what its reverse pass needs. Graphs are cheap to build and are meant to be
/// dropped after `backward`.
pub struct Graph<F> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Free leaf that receives a gradient (retrievable via [`Gradients::wrt`]).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Leaf bound to a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push_leaf(p.value.clone(), !p.frozen, Some(id));
        self.nodes[v.0].label = Some(p.name.clone());
        v
    }

    /// Looks a parameter up by name.
    pub fn param_named(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var, TensorError> {
        let id = store.require(name)?;
        Ok(self.param(store, id))
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attaches a diagnostic name to a node (reported by [`Graph::first_non_finite`]).
    pub fn set_label(&mut self, v: Var, label: &str) {
        self.nodes[v.0].label = Some(label.to_string());
    }

    /// First node, in recording order, whose value contains a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                None
            } else {
                Some(match &n.label {
                    Some(l) => format!("node {i} ({}, {l})", n.op.name()),
                    None => format!("node {i} ({})", n.op.name()),
                })
            }
        })
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse pass from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        let mut params = Vec::new();
        let mut leaves = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &self.nodes[i];
                if let Some(id) = node.param {
                    match params.iter_mut().find(|(p, _): &&mut (ParamId, Tensor<F>)| *p == id) {
                        Some((_, acc)) => acc.add_assign(&g),
                        None => params.push((id, g)),
                    }
                } else if matches!(node.op, Op::Leaf) {
                    leaves.push((Var(i), g));
                }
            }
        }
        Ok(Gradients { params, leaves })
    }

    pub(crate) fn accum(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "gradient shape for {:?}", self.nodes[v.0].op.name());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => self.backward_add(*a, *b, g, grads, F::one()),
            Op::Sub(a, b) => self.backward_add(*a, *b, g, grads, -F::one()),
            Op::Mul(a, b) => self.backward_mul(*a, *b, g, grads),
            Op::Scale(a, c) => self.accum(grads, *a, g.map(|v| v * *c)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |gv, xv| if xv > F::zero() { gv } else { F::zero() });
                self.accum(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, out, |gv, y| gv * y * (F::one() - y));
                self.accum(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, out, |gv, y| gv * (F::one() - y * y));
                self.accum(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |gv, xv| gv * stable_sigmoid(xv));
                self.accum(grads, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |gv, xv| gv / xv);
                self.accum(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = zip_map(g, out, |gv, y| gv * y);
                self.accum(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        F::zero()
                    }
                });
                self.accum(grads, *a, d);
            }
            Op::Softmax(a) => self.backward_softmax(*a, out, g, grads),
            Op::LogSoftmax(a) => self.backward_log_softmax(*a, out, g, grads),
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::MeanAxes {
                input,
                out_offsets,
                count,
            } => {
                let inv = F::one() / F::from_usize(*count).unwrap();
                let gd = g.data();
                let data = out_offsets.iter().map(|&o| gd[o] * inv).collect();
                self.accum(
                    grads,
                    *input,
                    Tensor::from_parts(self.shape(*input).to_vec(), data),
                );
            }
            Op::Reshape(a) => {
                let d = Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec());
                self.accum(grads, *a, d);
            }
            Op::Concat { inputs, axis } => self.backward_concat(inputs, *axis, g, grads),
            Op::Slice { input, axis, start } => self.backward_slice(*input, *axis, *start, g, grads),
            Op::Reverse { input, axis } => {
                let d = reverse_axis(g, *axis);
                self.accum(grads, *input, d);
            }
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.backward_conv(*input, *weight, *bias, geom, cols, g, grads),
            Op::MaxPool { input, argmax } => {
                let mut d = vec![F::zero(); self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                self.accum(
                    grads,
                    *input,
                    Tensor::from_parts(self.shape(*input).to_vec(), d),
                );
            }
            Op::GruCell {
                gi,
                h,
                w_hh,
                b_hh,
                saved,
            } => self.backward_gru(*gi, *h, *w_hh, *b_hh, saved, g, grads),
            Op::LstmCell {
                gi,
                hc,
                w_hh,
                b_hh,
                saved,
            } => self.backward_lstm(*gi, *hc, *w_hh, *b_hh, saved, g, grads),
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accum(grads, *input, Tensor::from_parts(g.shape().to_vec(), data));
            }
        }
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients<F> {
    params: Vec<(ParamId, Tensor<F>)>,
    leaves: Vec<(Var, Tensor<F>)>,
}

impl<F: Real> Gradients<F> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradient of a free leaf created with [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }
}

pub(crate) fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn stable_sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn reverse_axis<F: Real>(t: &Tensor<F>, axis: usize) -> Tensor<F> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for i in (0..len).rev() {
            let base = (o * len + i) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
