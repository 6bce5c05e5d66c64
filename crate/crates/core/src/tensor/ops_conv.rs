//! Channels-last convolutions lowered to GEMM, and spatial max-pooling.
//!
//! Layouts: 2D maps are `[N, H, W, C]`, 3D volumes `[N, T, H, W, C]`.
//! Kernels are `[kh, kw, C_in, C_out]` and `[kt, kh, kw, C_in, C_out]`.
//! Output extent per axis is `(in + 2 * pad - kernel) / stride + 1`.

use super::array::Tensor;
use super::graph::{Graph, Op, Var};
use super::scalar::Real;
use super::TensorError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub input: [usize; 3],
    pub channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
    pub out_channels: usize,
    /// Output shape as seen by the caller (rank 4 for 2D, rank 5 for 3D).
    pub out_shape: Vec<usize>,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.output.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.channels
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Output extent of one convolution axis, or `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid kernel-tap range `[lo, hi)` along one axis for output position `o`,
/// and the (possibly negative) input coordinate of tap 0.
fn taps(o: usize, stride: usize, pad: usize, kernel: usize, extent: usize) -> (usize, usize, isize) {
    let origin = (o * stride) as isize - pad as isize;
    let lo = (-origin).clamp(0, kernel as isize) as usize;
    let hi = (extent as isize - origin).clamp(0, kernel as isize) as usize;
    (lo, hi.max(lo), origin)
}

/// Visits every (row, kernel row run) pair: `f(row_offset_in_cols, src_offset_in_x, len)`
/// where the run covers taps `[j_lo, j_hi)` of one `(a, i)` kernel row, all channels.
fn for_each_run(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let [ti, hi, wi] = geom.input;
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.pad;
    let [to, ho, wo] = geom.output;
    let c = geom.channels;
    let k = geom.cols();
    let mut row = 0;
    for n in 0..geom.n {
        for ot in 0..to {
            let (a_lo, a_hi, t0) = taps(ot, st, pt, kt, ti);
            for oh in 0..ho {
                let (i_lo, i_hi, h0) = taps(oh, sh, ph, kh, hi);
                for ow in 0..wo {
                    let (j_lo, j_hi, w0) = taps(ow, sw, pw, kw, wi);
                    let base = row * k;
                    for a in a_lo..a_hi {
                        let t = (t0 + a as isize) as usize;
                        for i in i_lo..i_hi {
                            let h = (h0 + i as isize) as usize;
                            let w = (w0 + j_lo as isize) as usize;
                            let src = (((n * ti + t) * hi + h) * wi + w) * c;
                            let dst = base + ((a * kh + i) * kw + j_lo) * c;
                            f(dst, src, (j_hi - j_lo) * c);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<F: Real>(x: &[F], geom: &ConvGeom) -> Vec<F> {
    let mut cols = vec![F::zero(); geom.rows() * geom.cols()];
    for_each_run(geom, |dst, src, len| cols[dst..dst + len].copy_from_slice(&x[src..src + len]));
    cols
}

fn col2im<F: Real>(dcols: &[F], geom: &ConvGeom) -> Vec<F> {
    let [ti, hi, wi] = geom.input;
    let mut dx = vec![F::zero(); geom.n * ti * hi * wi * geom.channels];
    for_each_run(geom, |src, dst, len| {
        for (d, &s) in dx[dst..dst + len].iter_mut().zip(&dcols[src..src + len]) {
            *d = *d + s;
        }
    });
    dx
}

impl<F: Real> Graph<F> {
    /// 3D convolution over `[N, T, H, W, C]` with kernel `[kt, kh, kw, C, O]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[3] != xs[4] {
            return Err(TensorError::Shape {
                op: "conv3d",
                expected: xs,
                found: ws,
            });
        }
        let geom = self.conv_geom("conv3d", xs[0], [xs[1], xs[2], xs[3]], xs[4], [ws[0], ws[1], ws[2]], ws[4], stride, pad, 5)?;
        self.conv_apply(x, weight, bias, geom)
    }

    /// 2D convolution over `[N, H, W, C]` with kernel `[kh, kw, C, O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: xs,
                found: ws,
            });
        }
        let geom = self.conv_geom(
            "conv2d",
            xs[0],
            [1, xs[1], xs[2]],
            xs[3],
            [1, ws[0], ws[1]],
            ws[3],
            [1, stride[0], stride[1]],
            [0, pad[0], pad[1]],
            4,
        )?;
        self.conv_apply(x, weight, bias, geom)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        op: &'static str,
        n: usize,
        input: [usize; 3],
        channels: usize,
        kernel: [usize; 3],
        out_channels: usize,
        stride: [usize; 3],
        pad: [usize; 3],
        rank: usize,
    ) -> Result<ConvGeom, TensorError> {
        let mut output = [0; 3];
        for d in 0..3 {
            output[d] = conv_out_extent(input[d], kernel[d], stride[d], pad[d]).ok_or_else(|| {
                TensorError::Shape {
                    op,
                    expected: input.to_vec(),
                    found: kernel.to_vec(),
                }
            })?;
        }
        let out_shape = if rank == 5 {
            vec![n, output[0], output[1], output[2], out_channels]
        } else {
            vec![n, output[1], output[2], out_channels]
        };
        Ok(ConvGeom {
            n,
            input,
            channels,
            kernel,
            stride,
            pad,
            output,
            out_channels,
            out_shape,
        })
    }

    fn conv_apply(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var, TensorError> {
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(TensorError::Shape {
                    op: "conv bias",
                    expected: vec![geom.out_channels],
                    found: self.shape(b).to_vec(),
                });
            }
        }
        let (rows, k, o) = (geom.rows(), geom.cols(), geom.out_channels);
        let mut out = vec![F::zero(); rows * o];
        let cols = if geom.pointwise() {
            Vec::new()
        } else {
            im2col(self.value(x).data(), &geom)
        };
        let lhs = if geom.pointwise() { self.value(x).data() } else { &cols };
        F::gemm(rows, k, o, lhs, false, self.value(weight).data(), false, F::zero(), &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v = *v + bv;
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        let keep_cols = self.requires_grad(weight) && !geom.pointwise();
        let t = Tensor::from_parts(geom.out_shape.clone(), out);
        Ok(self.push(
            t,
            Op::Conv {
                input: x,
                weight,
                bias,
                geom,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_conv(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        cols: &[F],
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (rows, k, o) = (geom.rows(), geom.cols(), geom.out_channels);
        let gd = g.data();
        if self.requires_grad(weight) {
            let lhs = if geom.pointwise() { self.value(x).data() } else { cols };
            let mut dw = vec![F::zero(); k * o];
            F::gemm(k, rows, o, lhs, true, gd, false, F::zero(), &mut dw);
            self.accum(grads, weight, Tensor::from_parts(self.shape(weight).to_vec(), dw));
        }
        if let Some(b) = bias {
            if self.requires_grad(b) {
                let mut db = vec![F::zero(); o];
                for row in gd.chunks(o) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                self.accum(grads, b, Tensor::from_parts(vec![o], db));
            }
        }
        if self.requires_grad(x) {
            let mut dcols = vec![F::zero(); rows * k];
            F::gemm(rows, o, k, gd, false, self.value(weight).data(), true, F::zero(), &mut dcols);
            let dx = if geom.pointwise() { dcols } else { col2im(&dcols, geom) };
            self.accum(grads, x, Tensor::from_parts(self.shape(x).to_vec(), dx));
        }
    }

    /// Max-pool over the spatial axes of `[N, H, W, C]`, no padding.
    pub fn max_pool2d(&mut self, x: Var, window: [usize; 2], stride: [usize; 2]) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::Shape {
                op: "max_pool2d",
                expected: vec![0, 0, 0, 0],
                found: xs,
            });
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let shape_err = || TensorError::Shape {
            op: "max_pool2d",
            expected: vec![h, w],
            found: window.to_vec(),
        };
        let ho = conv_out_extent(h, window[0], stride[0], 0).ok_or_else(shape_err)?;
        let wo = conv_out_extent(w, window[1], stride[1], 0).ok_or_else(shape_err)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * ho * wo * c);
        let mut argmax = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for oh in 0..ho {
                for ow in 0..wo {
                    for ch in 0..c {
                        let mut best = F::neg_infinity();
                        let mut best_at = 0;
                        for i in 0..window[0] {
                            for j in 0..window[1] {
                                let at = ((b * h + oh * stride[0] + i) * w + ow * stride[1] + j) * c + ch;
                                if src[at] > best {
                                    best = src[at];
                                    best_at = at;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_at);
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, ho, wo, c], out),
            Op::MaxPool {
                input: x,
                argmax: if rg { argmax } else { Vec::new() },
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn direct_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, o) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[n, ho, wo, o], |flat| {
            let oc = flat % o;
            let ow = (flat / o) % wo;
            let oh = (flat / o / wo) % ho;
            let b = flat / o / wo / ho;
            let mut s = 0.0;
            for i in 0..kh {
                for j in 0..kw {
                    let hi = (oh * stride + i) as isize - pad as isize;
                    let wi = (ow * stride + j) as isize - pad as isize;
                    if hi < 0 || wi < 0 || hi as usize >= h || wi as usize >= wd {
                        continue;
                    }
                    for ic in 0..c {
                        s += x.get(&[b, hi as usize, wi as usize, ic]) * w.get(&[i, j, ic, oc]);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn same_padding_preserves_extent() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(&[1, 8, 8, 1]));
        let w = g.input(Tensor::<f64>::zeros(&[3, 3, 1, 1]));
        let y = g.conv2d(x, w, None, [1, 1], [1, 1]).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 8, 1]);
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Tensor::from_fn(&[2, 5, 6, 3], |i| ((i * 7919) % 97) as f64 / 97.0 - 0.5);
        let w = Tensor::from_fn(&[3, 3, 3, 4], |i| ((i * 104729) % 89) as f64 / 89.0 - 0.5);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            let y = g.conv2d(xv, wv, None, [stride, stride], [pad, pad]).unwrap();
            let expect = direct_conv2d(&x, &w, stride, pad);
            assert_eq!(g.shape(y), expect.shape());
            for (a, b) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv3d_with_unit_time_kernel_equals_per_frame_conv2d() {
        let x = Tensor::from_fn(&[1, 3, 4, 4, 2], |i| (i as f64 * 0.3).sin());
        let w = Tensor::from_fn(&[1, 3, 3, 2, 2], |i| (i as f64 * 0.7).cos());
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y3 = g.conv3d(xv, wv, None, [1, 1, 1], [0, 1, 1]).unwrap();
        let x2 = g.reshape(xv, &[3, 4, 4, 2]).unwrap();
        let w2 = g.reshape(wv, &[3, 3, 2, 2]).unwrap();
        let y2 = g.conv2d(x2, w2, None, [1, 1], [1, 1]).unwrap();
        assert_eq!(g.value(y3).data(), g.value(y2).data());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 4, 4, 3]));
        let w = g.input(Tensor::zeros(&[1, 1, 2, 5]));
        assert!(matches!(
            g.conv2d(x, w, None, [1, 1], [0, 0]),
            Err(TensorError::Shape { op: "conv2d", .. })
        ));
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64));
        let y = g.max_pool2d(x, [2, 2], [2, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}
