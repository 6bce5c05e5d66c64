//! Global mutual-information maximization.
//!
//! A unidirectional LSTM over the per-frame pooled features followed by a
//! linear map and a ReLU yields one nonnegative weight per frame:
//! `β_t = ReLU(W_linear · h_t + b_linear)`. The sequence representation is
//! `O = Σ_t β_t Z_t / T` (the divisor is the frame count, not `Σ β`), and a
//! two-layer discriminator scores `(O, Y)` pairs against shuffled labels.

use crate::lmim::mim_objective;
use crate::model::init;
use crate::tensor::{Graph, ParamStore, Real, RngStream, Tensor, TensorError, Var};

pub const HEAD_PREFIX: &str = "backend.head.";
pub const PREFIX: &str = "gmim.";

/// Initial `b_linear`, so every frame starts with a positive weight.
pub const HEAD_BIAS_INIT: f64 = 1.0;

/// Parameter names of the frame-weight head.
#[derive(Clone, Debug)]
pub struct WeightHead {
    pub w_ih: String,
    pub w_hh: String,
    pub b_ih: String,
    pub b_hh: String,
    pub w_linear: String,
    pub b_linear: String,
}

impl Default for WeightHead {
    fn default() -> Self {
        Self {
            w_ih: format!("{HEAD_PREFIX}lstm.w_ih"),
            w_hh: format!("{HEAD_PREFIX}lstm.w_hh"),
            b_ih: format!("{HEAD_PREFIX}lstm.b_ih"),
            b_hh: format!("{HEAD_PREFIX}lstm.b_hh"),
            w_linear: format!("{HEAD_PREFIX}linear.weight"),
            b_linear: format!("{HEAD_PREFIX}linear.bias"),
        }
    }
}

impl WeightHead {
    pub fn init<F: Real>(store: &mut ParamStore<F>, input: usize, hidden: usize, rng: &mut RngStream) -> Result<Self, TensorError> {
        let h = Self::default();
        store.insert(&h.w_ih, init::recurrent_input(input, hidden, 4, rng))?;
        store.insert(&h.w_hh, init::orthogonal_gates(hidden, 4, rng))?;
        let mut b = vec![F::zero(); 4 * hidden];
        // forget-gate bias of one on the input side
        for v in &mut b[hidden..2 * hidden] {
            *v = F::one();
        }
        store.insert(&h.b_ih, Tensor::new(&[4 * hidden], b)?)?;
        store.insert(&h.b_hh, Tensor::zeros(&[4 * hidden]))?;
        store.insert(&h.w_linear, init::fan_in_uniform(&[hidden, 1], hidden, rng))?;
        store.insert(&h.b_linear, Tensor::full(&[1], F::from_f64_lossy(HEAD_BIAS_INIT)))?;
        Ok(h)
    }
}

/// Per-frame weights `[B, T]` from pooled features `[B, T, D]`.
pub fn frame_weights<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, pooled: Var, head: &WeightHead) -> Result<Var, TensorError> {
    let s = g.shape(pooled).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Shape {
            op: "frame_weights",
            expected: vec![0, 0, 0],
            found: s,
        });
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let w_ih = g.param_named(store, &head.w_ih)?;
    let w_hh = g.param_named(store, &head.w_hh)?;
    let b_ih = g.param_named(store, &head.b_ih)?;
    let b_hh = g.param_named(store, &head.b_hh)?;
    let w_lin = g.param_named(store, &head.w_linear)?;
    let b_lin = g.param_named(store, &head.b_linear)?;
    let hidden = g.shape(w_hh)[0];
    let flat = g.reshape(pooled, &[b * t, d])?;
    let gi = g.linear(flat, w_ih, b_ih)?;
    let gi = g.reshape(gi, &[b, t, 4 * hidden])?;
    let mut hc = g.input(Tensor::zeros(&[b, 2 * hidden]));
    let mut pre = Vec::with_capacity(t);
    for step in 0..t {
        let x = g.slice(gi, 1, step, 1)?;
        let x = g.reshape(x, &[b, 4 * hidden])?;
        hc = g.lstm_cell(x, hc, w_hh, b_hh)?;
        let h = g.slice(hc, 1, 0, hidden)?;
        pre.push(g.linear(h, w_lin, b_lin)?);
    }
    let pre = g.concat(&pre, 1)?;
    Ok(g.relu(pre))
}

/// `O = Σ_t β_t Z_t / T` for `Z: [B, T, F]` and `β: [B, T]`.
pub fn weighted_pool<F: Real>(g: &mut Graph<F>, states: Var, beta: Var) -> Result<Var, TensorError> {
    let zs = g.shape(states).to_vec();
    let bs = g.shape(beta).to_vec();
    if zs.len() != 3 || bs != zs[..2] {
        return Err(TensorError::Shape {
            op: "weighted_pool",
            expected: zs,
            found: bs,
        });
    }
    let b3 = g.reshape(beta, &[zs[0], zs[1], 1])?;
    let weighted = g.mul(states, b3)?;
    g.mean(weighted, &[1])
}

/// Parameter names of the two linear layers `(2N + C) -> hidden -> 1`.
#[derive(Clone, Debug)]
pub struct GlobalDiscriminator {
    pub fc1_weight: String,
    pub fc1_bias: String,
    pub fc2_weight: String,
    pub fc2_bias: String,
}

impl Default for GlobalDiscriminator {
    fn default() -> Self {
        Self {
            fc1_weight: format!("{PREFIX}fc1.weight"),
            fc1_bias: format!("{PREFIX}fc1.bias"),
            fc2_weight: format!("{PREFIX}fc2.weight"),
            fc2_bias: format!("{PREFIX}fc2.bias"),
        }
    }
}

impl GlobalDiscriminator {
    pub fn init<F: Real>(store: &mut ParamStore<F>, inputs: usize, hidden: usize, rng: &mut RngStream) -> Result<Self, TensorError> {
        let d = Self::default();
        store.insert(&d.fc1_weight, init::fan_in_uniform(&[inputs, hidden], inputs, rng))?;
        store.insert(&d.fc1_bias, Tensor::zeros(&[hidden]))?;
        store.insert(&d.fc2_weight, init::fan_in_uniform(&[hidden, 1], hidden, rng))?;
        store.insert(&d.fc2_bias, Tensor::zeros(&[1]))?;
        Ok(d)
    }
}

/// Scores in `(0, 1)`, shape `[B]`, for representations `[B, 2N]` and one-hot labels `[B, C]`.
pub fn gmim_scores<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, repr: Var, labels: Var, d: &GlobalDiscriminator) -> Result<Var, TensorError> {
    let b = g.shape(repr)[0];
    if g.shape(labels)[0] != b {
        return Err(TensorError::Shape {
            op: "gmim_scores",
            expected: g.shape(repr).to_vec(),
            found: g.shape(labels).to_vec(),
        });
    }
    let x = g.concat(&[repr, labels], 1)?;
    let w1 = g.param_named(store, &d.fc1_weight)?;
    let b1 = g.param_named(store, &d.fc1_bias)?;
    let w2 = g.param_named(store, &d.fc2_weight)?;
    let b2 = g.param_named(store, &d.fc2_bias)?;
    let h = g.linear(x, w1, b1)?;
    let h = g.relu(h);
    let t = g.linear(h, w2, b2)?;
    let s = g.sigmoid(t);
    g.reshape(s, &[b])
}

/// L_GMIM from paired and unpaired discriminator outputs over a batch.
pub fn gmim_objective<F: Real>(g: &mut Graph<F>, paired: Var, unpaired: Var) -> Result<Var, TensorError> {
    let b = g.shape(paired)[0];
    if b < 2 {
        return Err(TensorError::Domain {
            op: "gmim_objective",
            detail: format!("batch of {b}; unpaired samples need at least 2"),
        });
    }
    mim_objective(g, paired, unpaired)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_store(d: usize, hidden: usize) -> (ParamStore<f64>, WeightHead) {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(4, 4);
        let h = WeightHead::init(&mut s, d, hidden, &mut rng).unwrap();
        (s, h)
    }

    #[test]
    fn negative_preactivations_give_zero_weights() {
        let (mut s, h) = head_store(3, 4);
        let id = s.id(&h.b_linear).unwrap();
        s.get_mut(id).value.fill(-100.0);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.1).sin()));
        let beta = frame_weights(&mut g, &s, x, &h).unwrap();
        assert_eq!(g.shape(beta), &[2, 5]);
        assert!(g.value(beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_recurrence_and_unit_bias_give_unit_weights() {
        let (mut s, h) = head_store(3, 4);
        for name in [&h.w_ih, &h.w_hh, &h.b_ih, &h.b_hh] {
            let id = s.id(name).unwrap();
            s.get_mut(id).value.fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 6, 3], |i| i as f64));
        let beta = frame_weights(&mut g, &s, x, &h).unwrap();
        assert!(g.value(beta).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pooling_identities() {
        let z = Tensor::from_fn(&[1, 4, 3], |i| (i as f64 * 0.7).cos());
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let ones = g.input(Tensor::ones(&[1, 4]));
        let o = weighted_pool(&mut g, zv, ones).unwrap();
        let mean = g.mean(zv, &[1]).unwrap();
        assert_eq!(g.value(o).data(), g.value(mean).data());

        let mut sel = Tensor::zeros(&[1, 4]);
        sel.data_mut()[2] = 4.0;
        let sel = g.input(sel);
        let o = weighted_pool(&mut g, zv, sel).unwrap();
        for c in 0..3 {
            assert!((g.value(o).data()[c] - z.get(&[0, 2, c])).abs() < 1e-15);
        }

        let zero = g.input(Tensor::zeros(&[1, 4]));
        let o = weighted_pool(&mut g, zv, zero).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));

        let bad = g.input(Tensor::zeros(&[1, 3]));
        assert!(weighted_pool(&mut g, zv, bad).is_err());
    }

    #[test]
    fn objective_needs_two_samples() {
        let mut g = Graph::new();
        let p = g.input(Tensor::<f64>::full(&[1], 0.5));
        let u = g.input(Tensor::<f64>::full(&[1], 0.5));
        assert!(gmim_objective(&mut g, p, u).is_err());
        let p = g.input(Tensor::<f64>::full(&[2], 0.8));
        let u = g.input(Tensor::<f64>::full(&[2], 0.2));
        let l = gmim_objective(&mut g, p, u).unwrap();
        assert!((g.value(l).item() - 2.0 * 0.8f64.ln()).abs() < 1e-12);
        assert!((g.value(l).item() + 0.44629).abs() < 1e-5);
    }
}
