//! Fused recurrent cells.
//!
//! Both cells take the input projection `x @ W_ih + b_ih` precomputed for the
//! step, so a layer can project the whole sequence with a single matmul.
//!
//! GRU gate order `(r, z, n)`:
//! `r = σ(gi_r + gh_r)`, `z = σ(gi_z + gh_z)`, `n = tanh(gi_n + r ⊙ gh_n)`,
//! `h' = (1 - z) ⊙ n + z ⊙ h`, with `gh = h @ W_hh + b_hh`.
//!
//! LSTM gate order `(i, f, g, o)`; state is packed as `[h | c]`:
//! `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.

use super::array::Tensor;
use super::graph::{stable_sigmoid, Graph, Op, Var};
use super::scalar::Real;
use super::TensorError;

pub(crate) struct GruSaved<F> {
    gh: Vec<F>,
    r: Vec<F>,
    z: Vec<F>,
    n: Vec<F>,
}

pub(crate) struct LstmSaved<F> {
    gates: Vec<F>,
    tanh_c: Vec<F>,
}

fn hidden_projection<F: Real>(h: &[F], w_hh: &[F], b_hh: &[F], batch: usize, hidden: usize, width: usize) -> Vec<F> {
    let mut gh = vec![F::zero(); batch * width];
    for row in gh.chunks_mut(width) {
        row.copy_from_slice(b_hh);
    }
    F::gemm(batch, hidden, width, h, false, w_hh, false, F::one(), &mut gh);
    gh
}

impl<F: Real> Graph<F> {
    fn check_cell(&self, op: &'static str, gates: usize, gi: Var, state: Var, w_hh: Var, b_hh: Var, state_mult: usize) -> Result<(usize, usize), TensorError> {
        let gs = self.shape(gi);
        let hs = self.shape(state);
        let err = |found: &[usize], expected: Vec<usize>| TensorError::Shape {
            op,
            expected,
            found: found.to_vec(),
        };
        if hs.len() != 2 || hs[1] % state_mult != 0 {
            return Err(err(hs, vec![0, 0]));
        }
        let (b, h) = (hs[0], hs[1] / state_mult);
        if gs != [b, gates * h] {
            return Err(err(gs, vec![b, gates * h]));
        }
        if self.shape(w_hh) != [h, gates * h] {
            return Err(err(self.shape(w_hh), vec![h, gates * h]));
        }
        if self.shape(b_hh) != [gates * h] {
            return Err(err(self.shape(b_hh), vec![gates * h]));
        }
        Ok((b, h))
    }

    /// One GRU step. `gi: [B, 3H]`, `h: [B, H]`, `w_hh: [H, 3H]`, `b_hh: [3H]`.
    pub fn gru_cell(&mut self, gi: Var, h: Var, w_hh: Var, b_hh: Var) -> Result<Var, TensorError> {
        let (batch, hid) = self.check_cell("gru_cell", 3, gi, h, w_hh, b_hh, 1)?;
        let gh = hidden_projection(
            self.value(h).data(),
            self.value(w_hh).data(),
            self.value(b_hh).data(),
            batch,
            hid,
            3 * hid,
        );
        let giv = self.value(gi).data();
        let hv = self.value(h).data();
        let mut r = vec![F::zero(); batch * hid];
        let mut z = vec![F::zero(); batch * hid];
        let mut n = vec![F::zero(); batch * hid];
        let mut out = vec![F::zero(); batch * hid];
        for b in 0..batch {
            let gi_row = &giv[b * 3 * hid..(b + 1) * 3 * hid];
            let gh_row = &gh[b * 3 * hid..(b + 1) * 3 * hid];
            for j in 0..hid {
                let k = b * hid + j;
                r[k] = stable_sigmoid(gi_row[j] + gh_row[j]);
                z[k] = stable_sigmoid(gi_row[hid + j] + gh_row[hid + j]);
                n[k] = (gi_row[2 * hid + j] + r[k] * gh_row[2 * hid + j]).tanh();
                out[k] = (F::one() - z[k]) * n[k] + z[k] * hv[k];
            }
        }
        let rg = self.any_grad(&[gi, h, w_hh, b_hh]);
        let saved = if rg {
            GruSaved { gh, r, z, n }
        } else {
            GruSaved {
                gh: Vec::new(),
                r: Vec::new(),
                z: Vec::new(),
                n: Vec::new(),
            }
        };
        Ok(self.push(
            Tensor::from_parts(vec![batch, hid], out),
            Op::GruCell {
                gi,
                h,
                w_hh,
                b_hh,
                saved,
            },
            rg,
        ))
    }

    /// One LSTM step over packed state. `gi: [B, 4H]`, `hc: [B, 2H]`,
    /// `w_hh: [H, 4H]`, `b_hh: [4H]`; returns the packed `[h' | c']`.
    pub fn lstm_cell(&mut self, gi: Var, hc: Var, w_hh: Var, b_hh: Var) -> Result<Var, TensorError> {
        let (batch, hid) = self.check_cell("lstm_cell", 4, gi, hc, w_hh, b_hh, 2)?;
        let hcv = self.value(hc).data();
        let h: Vec<F> = hcv
            .chunks(2 * hid)
            .flat_map(|row| row[..hid].iter().copied())
            .collect();
        let mut gates = hidden_projection(
            &h,
            self.value(w_hh).data(),
            self.value(b_hh).data(),
            batch,
            hid,
            4 * hid,
        );
        let giv = self.value(gi).data();
        let mut tanh_c = vec![F::zero(); batch * hid];
        let mut out = vec![F::zero(); batch * 2 * hid];
        for b in 0..batch {
            let row = &mut gates[b * 4 * hid..(b + 1) * 4 * hid];
            for (v, &x) in row.iter_mut().zip(&giv[b * 4 * hid..(b + 1) * 4 * hid]) {
                *v = *v + x;
            }
            for j in 0..hid {
                let i = stable_sigmoid(row[j]);
                let f = stable_sigmoid(row[hid + j]);
                let gg = row[2 * hid + j].tanh();
                let o = stable_sigmoid(row[3 * hid + j]);
                row[j] = i;
                row[hid + j] = f;
                row[2 * hid + j] = gg;
                row[3 * hid + j] = o;
                let c_prev = hcv[b * 2 * hid + hid + j];
                let c = f * c_prev + i * gg;
                let tc = c.tanh();
                tanh_c[b * hid + j] = tc;
                out[b * 2 * hid + j] = o * tc;
                out[b * 2 * hid + hid + j] = c;
            }
        }
        let rg = self.any_grad(&[gi, hc, w_hh, b_hh]);
        let saved = if rg {
            LstmSaved { gates, tanh_c }
        } else {
            LstmSaved {
                gates: Vec::new(),
                tanh_c: Vec::new(),
            }
        };
        Ok(self.push(
            Tensor::from_parts(vec![batch, 2 * hid], out),
            Op::LstmCell {
                gi,
                hc,
                w_hh,
                b_hh,
                saved,
            },
            rg,
        ))
    }

    fn recurrent_param_grads(
        &self,
        state: &[F],
        dgh: &[F],
        w_hh: Var,
        b_hh: Var,
        dims: (usize, usize, usize),
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (batch, hid, width) = dims;
        if self.requires_grad(w_hh) {
            let mut dw = vec![F::zero(); hid * width];
            F::gemm(hid, batch, width, state, true, dgh, false, F::zero(), &mut dw);
            self.accum(grads, w_hh, Tensor::from_parts(vec![hid, width], dw));
        }
        if self.requires_grad(b_hh) {
            let mut db = vec![F::zero(); width];
            for row in dgh.chunks(width) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            self.accum(grads, b_hh, Tensor::from_parts(vec![width], db));
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_gru(
        &self,
        gi: Var,
        h: Var,
        w_hh: Var,
        b_hh: Var,
        s: &GruSaved<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let batch = self.shape(h)[0];
        let hid = self.shape(h)[1];
        let hv = self.value(h).data();
        let gd = g.data();
        let mut dgi = vec![F::zero(); batch * 3 * hid];
        let mut dgh = vec![F::zero(); batch * 3 * hid];
        let mut dh = vec![F::zero(); batch * hid];
        for b in 0..batch {
            for j in 0..hid {
                let k = b * hid + j;
                let (r, z, n) = (s.r[k], s.z[k], s.n[k]);
                let go = gd[k];
                let dn = go * (F::one() - z);
                let dz = go * (hv[k] - n);
                dh[k] = go * z;
                let dn_pre = dn * (F::one() - n * n);
                let dr = dn_pre * s.gh[b * 3 * hid + 2 * hid + j];
                let dr_pre = dr * r * (F::one() - r);
                let dz_pre = dz * z * (F::one() - z);
                let base = b * 3 * hid;
                dgi[base + j] = dr_pre;
                dgi[base + hid + j] = dz_pre;
                dgi[base + 2 * hid + j] = dn_pre;
                dgh[base + j] = dr_pre;
                dgh[base + hid + j] = dz_pre;
                dgh[base + 2 * hid + j] = dn_pre * r;
            }
        }
        if self.requires_grad(h) {
            F::gemm(batch, 3 * hid, hid, &dgh, false, self.value(w_hh).data(), true, F::one(), &mut dh);
            self.accum(grads, h, Tensor::from_parts(vec![batch, hid], dh));
        }
        self.recurrent_param_grads(hv, &dgh, w_hh, b_hh, (batch, hid, 3 * hid), grads);
        self.accum(grads, gi, Tensor::from_parts(vec![batch, 3 * hid], dgi));
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_lstm(
        &self,
        gi: Var,
        hc: Var,
        w_hh: Var,
        b_hh: Var,
        s: &LstmSaved<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let batch = self.shape(hc)[0];
        let hid = self.shape(hc)[1] / 2;
        let hcv = self.value(hc).data();
        let gd = g.data();
        let mut dgates = vec![F::zero(); batch * 4 * hid];
        let mut dhc = vec![F::zero(); batch * 2 * hid];
        for b in 0..batch {
            let gates = &s.gates[b * 4 * hid..(b + 1) * 4 * hid];
            for j in 0..hid {
                let (i, f, gg, o) = (gates[j], gates[hid + j], gates[2 * hid + j], gates[3 * hid + j]);
                let tc = s.tanh_c[b * hid + j];
                let dh_out = gd[b * 2 * hid + j];
                let dc_out = gd[b * 2 * hid + hid + j];
                let dc = dc_out + dh_out * o * (F::one() - tc * tc);
                let c_prev = hcv[b * 2 * hid + hid + j];
                let base = b * 4 * hid;
                dgates[base + j] = dc * gg * i * (F::one() - i);
                dgates[base + hid + j] = dc * c_prev * f * (F::one() - f);
                dgates[base + 2 * hid + j] = dc * i * (F::one() - gg * gg);
                dgates[base + 3 * hid + j] = dh_out * tc * o * (F::one() - o);
                dhc[b * 2 * hid + hid + j] = dc * f;
            }
        }
        let h: Vec<F> = hcv
            .chunks(2 * hid)
            .flat_map(|row| row[..hid].iter().copied())
            .collect();
        if self.requires_grad(hc) {
            let mut dh = vec![F::zero(); batch * hid];
            F::gemm(batch, 4 * hid, hid, &dgates, false, self.value(w_hh).data(), true, F::zero(), &mut dh);
            for b in 0..batch {
                dhc[b * 2 * hid..b * 2 * hid + hid].copy_from_slice(&dh[b * hid..(b + 1) * hid]);
            }
            self.accum(grads, hc, Tensor::from_parts(vec![batch, 2 * hid], dhc));
        }
        self.recurrent_param_grads(&h, &dgates, w_hh, b_hh, (batch, hid, 4 * hid), grads);
        self.accum(grads, gi, Tensor::from_parts(vec![batch, 4 * hid], dgates));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_with_zero_weights_halves_state() {
        // r = z = 1/2 and n = 0 when every pre-activation is zero: h' = h / 2
        let mut g = Graph::new();
        let gi = g.input(Tensor::<f64>::zeros(&[2, 9]));
        let h = g.input(Tensor::from_fn(&[2, 3], |i| i as f64));
        let w = g.input(Tensor::zeros(&[3, 9]));
        let b = g.input(Tensor::zeros(&[9]));
        let out = g.gru_cell(gi, h, w, b).unwrap();
        let expect: Vec<f64> = (0..6).map(|i| i as f64 / 2.0).collect();
        assert_eq!(g.value(out).data(), &expect[..]);
    }

    #[test]
    fn lstm_state_packing() {
        let mut g = Graph::new();
        let gi = g.input(Tensor::<f64>::zeros(&[1, 8]));
        let hc = g.input(Tensor::from_f64(&[1, 4], &[0.0, 0.0, 1.0, -1.0]).unwrap());
        let w = g.input(Tensor::zeros(&[2, 8]));
        let b = g.input(Tensor::zeros(&[8]));
        let out = g.lstm_cell(gi, hc, w, b).unwrap();
        let v = g.value(out).data();
        // i = f = o = 1/2, g = 0: c' = c / 2, h' = tanh(c') / 2
        assert!((v[2] - 0.5).abs() < 1e-15 && (v[3] + 0.5).abs() < 1e-15);
        assert!((v[0] - 0.5f64.tanh() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cell_shape_errors() {
        let mut g = Graph::<f64>::new();
        let gi = g.input(Tensor::zeros(&[2, 8]));
        let h = g.input(Tensor::zeros(&[2, 3]));
        let w = g.input(Tensor::zeros(&[3, 9]));
        let b = g.input(Tensor::zeros(&[9]));
        assert!(g.gru_cell(gi, h, w, b).is_err());
    }
}
