//! Local mutual-information maximization.
//!
//! Each spatial cell of the final pre-pooling feature map is scored against
//! the sequence label by a small 1x1-convolution discriminator. Paired cells
//! carry the sample's own label; unpaired cells carry a label taken from
//! another position of the batch. The objective is the mean over batch, time
//! steps and cells of `log s_paired + log(1 - s_unpaired)`.

use crate::model::init;
use crate::tensor::{Graph, ParamStore, Real, RngStream, Tensor, TensorError, Var};

/// Numerical guard on discriminator outputs before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

pub const PREFIX: &str = "lmim.";

/// One-hot encoding of a class index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelOneHot {
    class: usize,
    classes: usize,
}

impl LabelOneHot {
    pub fn new(class: usize, classes: usize) -> Result<Self, TensorError> {
        if class >= classes {
            return Err(TensorError::Domain {
                op: "one_hot",
                detail: format!("class {class} outside [0, {classes})"),
            });
        }
        Ok(Self { class, classes })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn to_vec<F: Real>(&self) -> Vec<F> {
        (0..self.classes)
            .map(|c| if c == self.class { F::one() } else { F::zero() })
            .collect()
    }
}

/// `C x H x W` tensor whose channel column at every cell equals `y`.
pub fn broadcast_label<F: Real>(y: &LabelOneHot, h: usize, w: usize) -> Tensor<F> {
    let plane = h * w;
    Tensor::from_fn(&[y.classes(), h, w], |i| {
        if i / plane == y.class() {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Channels-last batch variant: `[N, H, W, C]` with row `n` carrying `labels[n]`.
pub fn broadcast_labels_nhwc<F: Real>(labels: &[usize], classes: usize, h: usize, w: usize) -> Tensor<F> {
    let per = h * w * classes;
    Tensor::from_fn(&[labels.len(), h, w, classes], |i| {
        if i % classes == labels[i / per] {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Parameter names of the two 1x1 layers `(C + D) -> hidden -> 1`.
#[derive(Clone, Debug)]
pub struct LocalDiscriminator {
    pub conv1_weight: String,
    pub conv1_bias: String,
    pub conv2_weight: String,
    pub conv2_bias: String,
}

impl Default for LocalDiscriminator {
    fn default() -> Self {
        Self {
            conv1_weight: format!("{PREFIX}conv1.weight"),
            conv1_bias: format!("{PREFIX}conv1.bias"),
            conv2_weight: format!("{PREFIX}conv2.weight"),
            conv2_bias: format!("{PREFIX}conv2.bias"),
        }
    }
}

impl LocalDiscriminator {
    pub fn init<F: Real>(store: &mut ParamStore<F>, channels_in: usize, hidden: usize, rng: &mut RngStream) -> Result<Self, TensorError> {
        let d = Self::default();
        store.insert(&d.conv1_weight, init::fan_in_uniform(&[1, 1, channels_in, hidden], channels_in, rng))?;
        store.insert(&d.conv1_bias, Tensor::zeros(&[hidden]))?;
        store.insert(&d.conv2_weight, init::fan_in_uniform(&[1, 1, hidden, 1], hidden, rng))?;
        store.insert(&d.conv2_bias, Tensor::zeros(&[1]))?;
        Ok(d)
    }

    /// Input channel count `C + D` expected by the first layer.
    pub fn channels_in<F: Real>(&self, store: &ParamStore<F>) -> Result<usize, TensorError> {
        Ok(store.value(store.require(&self.conv1_weight)?).shape()[2])
    }
}

/// Per-cell dependence scores in `(0, 1)` for features `[N, H, W, D]` and
/// broadcast labels `[N, H, W, C]`; returns `[N, H, W]`.
pub fn lmim_scores<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    features: Var,
    labels: Var,
    d: &LocalDiscriminator,
) -> Result<Var, TensorError> {
    let fs = g.shape(features).to_vec();
    let ls = g.shape(labels).to_vec();
    if fs.len() != 4 || ls.len() != 4 || fs[..3] != ls[..3] {
        return Err(TensorError::Shape {
            op: "lmim_scores",
            expected: fs,
            found: ls,
        });
    }
    let expected = d.channels_in(store)?;
    if fs[3] + ls[3] != expected {
        return Err(TensorError::Shape {
            op: "lmim_scores",
            expected: vec![expected],
            found: vec![fs[3] + ls[3]],
        });
    }
    let joined = g.concat(&[labels, features], 3)?;
    let w1 = g.param_named(store, &d.conv1_weight)?;
    let b1 = g.param_named(store, &d.conv1_bias)?;
    let w2 = g.param_named(store, &d.conv2_weight)?;
    let b2 = g.param_named(store, &d.conv2_bias)?;
    let h = g.conv2d(joined, w1, Some(b1), [1, 1], [0, 0])?;
    let h = g.relu(h);
    let t = g.conv2d(h, w2, Some(b2), [1, 1], [0, 0])?;
    let s = g.sigmoid(t);
    g.reshape(s, &fs[..3])
}

/// `mean log(clamp(s)) + mean log(1 - clamp(s'))` over paired scores `s` and
/// unpaired scores `s'`. The mean runs over every entry, i.e. over batch,
/// time steps and cells.
pub fn mim_objective<F: Real>(g: &mut Graph<F>, paired: Var, unpaired: Var) -> Result<Var, TensorError> {
    if g.shape(paired) != g.shape(unpaired) {
        return Err(TensorError::Shape {
            op: "mim_objective",
            expected: g.shape(paired).to_vec(),
            found: g.shape(unpaired).to_vec(),
        });
    }
    let p = g.clamp(paired, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let lp = g.log(p);
    let lp = g.mean_all(lp);
    let u = g.clamp(unpaired, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let u = g.one_minus(u);
    let lu = g.log(u);
    let lu = g.mean_all(lu);
    g.add(lp, lu)
}

/// L_LMIM over paired and unpaired score maps of identical layout.
pub fn lmim_objective<F: Real>(g: &mut Graph<F>, paired: Var, unpaired: Var) -> Result<Var, TensorError> {
    mim_objective(g, paired, unpaired)
}

/// L_LMIM for plain score lists (same clamp guard as the graph version).
pub fn lmim_objective_values(paired: &[f64], unpaired: &[f64]) -> Result<f64, TensorError> {
    if paired.is_empty() || unpaired.is_empty() {
        return Err(TensorError::Domain {
            op: "lmim_objective",
            detail: "empty score set".into(),
        });
    }
    let clamp = |s: f64| s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let lp = paired.iter().map(|&s| clamp(s).ln()).sum::<f64>() / paired.len() as f64;
    let lu = unpaired.iter().map(|&s| (1.0 - clamp(s)).ln()).sum::<f64>() / unpaired.len() as f64;
    Ok(lp + lu)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn label_planes() {
        let y = LabelOneHot::new(1, 3).unwrap();
        let t: Tensor<f64> = broadcast_label(&y, 2, 2);
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data(), &[0., 0., 0., 0., 1., 1., 1., 1., 0., 0., 0., 0.]);
        let one: Tensor<f64> = broadcast_label(&LabelOneHot::new(0, 1).unwrap(), 3, 2);
        assert!(one.data().iter().all(|&v| v == 1.0));
        for h in 0..2 {
            for w in 0..2 {
                let col: Vec<f64> = (0..3).map(|c| t.get(&[c, h, w])).collect();
                assert_eq!(col, y.to_vec::<f64>());
            }
        }
        assert!(LabelOneHot::new(3, 3).is_err());
    }

    #[test]
    fn nhwc_labels_follow_rows() {
        let t: Tensor<f32> = broadcast_labels_nhwc(&[2, 0], 3, 2, 2);
        assert_eq!(t.get(&[0, 1, 1, 2]), 1.0);
        assert_eq!(t.get(&[0, 1, 1, 0]), 0.0);
        assert_eq!(t.get(&[1, 0, 1, 0]), 1.0);
    }

    fn zero_discriminator(c: usize, d: usize) -> (ParamStore<f64>, LocalDiscriminator) {
        let mut s = ParamStore::new();
        let mut rng = RngStream::new(0, 0);
        let disc = LocalDiscriminator::init(&mut s, c + d, 8, &mut rng).unwrap();
        for p in s.iter_mut() {
            p.value.fill(0.0);
        }
        (s, disc)
    }

    #[test]
    fn zero_weights_give_half_everywhere() {
        let (s, disc) = zero_discriminator(3, 5);
        let mut g = Graph::new();
        let f = g.input(Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin()));
        let y = g.input(broadcast_labels_nhwc(&[0, 2], 3, 3, 4));
        let sc = lmim_scores(&mut g, &s, f, y, &disc).unwrap();
        assert_eq!(g.shape(sc), &[2, 3, 4]);
        assert!(g.value(sc).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (s, disc) = zero_discriminator(3, 5);
        let mut g = Graph::new();
        let f = g.input(Tensor::<f64>::zeros(&[1, 2, 2, 4]));
        let y = g.input(broadcast_labels_nhwc(&[0], 3, 2, 2));
        assert!(lmim_scores(&mut g, &s, f, y, &disc).is_err());
    }

    #[test]
    fn objective_examples() {
        assert!((lmim_objective_values(&[0.5; 4], &[0.5; 4]).unwrap() + 2.0 * LN2).abs() < 1e-12);
        assert!(lmim_objective_values(&[1.0; 4], &[0.0; 4]).unwrap().abs() < 1e-6);
        let v = lmim_objective_values(&[0.9, 0.9, 0.5, 0.5], &[0.1; 4]).unwrap();
        assert!((v + 0.50461).abs() < 1e-5, "{v}");
        assert!(lmim_objective_values(&[], &[0.1]).is_err());
    }

    #[test]
    fn graph_objective_matches_values() {
        let paired = [0.9, 0.9, 0.5, 0.5];
        let unpaired = [0.1, 0.2, 0.3, 0.05];
        let mut g = Graph::new();
        let p = g.input(Tensor::<f64>::from_f64(&[1, 2, 2], &paired).unwrap());
        let u = g.input(Tensor::from_f64(&[1, 2, 2], &unpaired).unwrap());
        let l = lmim_objective(&mut g, p, u).unwrap();
        let expect = lmim_objective_values(&paired, &unpaired).unwrap();
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }
}
