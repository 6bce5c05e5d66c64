use mimseq::gmim::weighted_pool;
use mimseq::harness::LossBreakdown;
use mimseq::mi::{cyclic_permutation, jsd_objective, softplus_phi, DiscriminatorScores};
use mimseq::model::{Heads, Mode, ModelConfig, SequenceModel};
use mimseq::tensor::{Graph, RngStream, Tensor};
use proptest::prelude::*;

fn vec_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, len)
}

fn softmax_rows(rows: usize, data: &[f64]) -> Vec<f64> {
    let cols = data.len() / rows;
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(&[rows, cols], data).unwrap());
    let s = g.softmax(x);
    g.value(s).data().to_vec()
}

/// Direct BCE on sigmoid scores, computed without softplus.
fn naive_negative_bce(paired: &[f64], unpaired: &[f64]) -> f64 {
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    let lp = paired.iter().map(|&t| sig(t).ln()).sum::<f64>() / paired.len() as f64;
    let lu = unpaired.iter().map(|&t| (1.0 - sig(t)).ln()).sum::<f64>() / unpaired.len() as f64;
    lp + lu
}

fn pool(b: usize, t: usize, f: usize, z: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let zv = g.input(Tensor::from_f64(&[b, t, f], z).unwrap());
    let bv = g.input(Tensor::from_f64(&[b, t], beta).unwrap());
    let o = weighted_pool(&mut g, zv, bv).unwrap();
    assert_eq!(g.shape(o), &[b, f]);
    g.value(o).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, data in vec_strategy(1..9)) {
        let data: Vec<f64> = data.iter().cycle().take(rows * data.len()).cloned().collect();
        let s = softmax_rows(rows, &data);
        for row in s.chunks(data.len() / rows) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(data in vec_strategy(1..10), shift in -50.0f64..50.0) {
        let a = softmax_rows(1, &data);
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let b = softmax_rows(1, &shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_weights_give_the_time_mean(b in 1usize..3, t in 1usize..6, f in 1usize..4, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let z: Vec<f64> = (0..b * t * f).map(|_| rng.normal()).collect();
        let o = pool(b, t, f, &z, &vec![1.0; b * t]);
        for bi in 0..b {
            for fi in 0..f {
                let mean = (0..t).map(|ti| z[(bi * t + ti) * f + fi]).sum::<f64>() / t as f64;
                prop_assert!((o[bi * f + fi] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_weights_select_a_frame(t in 1usize..6, f in 1usize..4, k in 0usize..6, seed in any::<u64>()) {
        let k = k % t;
        let mut rng = RngStream::new(seed, 0);
        let z: Vec<f64> = (0..t * f).map(|_| rng.normal()).collect();
        let mut beta = vec![0.0; t];
        beta[k] = t as f64;
        let o = pool(1, t, f, &z, &beta);
        for fi in 0..f {
            prop_assert!((o[fi] - z[k * f + fi]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero(t in 1usize..6, f in 1usize..4, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let z: Vec<f64> = (0..t * f).map(|_| rng.normal()).collect();
        prop_assert!(pool(1, t, f, &z, &vec![0.0; t]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_is_linear_in_each_argument(t in 1usize..6, f in 1usize..4, c in 0.1f64..5.0, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };
        let (z1, z2, b1, b2) = (draw(t * f), draw(t * f), draw(t), draw(t));
        let zs: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let bs: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let bc: Vec<f64> = b1.iter().map(|v| c * v).collect();
        let (o11, o21, o12) = (pool(1, t, f, &z1, &b1), pool(1, t, f, &z2, &b1), pool(1, t, f, &z1, &b2));
        let sum_z = pool(1, t, f, &zs, &b1);
        let sum_b = pool(1, t, f, &z1, &bs);
        let scaled = pool(1, t, f, &z1, &bc);
        for i in 0..f {
            prop_assert!((sum_z[i] - o11[i] - o21[i]).abs() < 1e-6);
            prop_assert!((sum_b[i] - o11[i] - o12[i]).abs() < 1e-6);
            prop_assert!((scaled[i] - c * o11[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_breakdown_total_identity(ce in 0.0f64..10.0, l in -5.0f64..0.0, g in -5.0f64..0.0) {
        let b = LossBreakdown::new(ce, l, g);
        prop_assert!((b.total - (ce - l - g)).abs() < 1e-12);
    }

    #[test]
    fn jsd_matches_negative_bce(p in vec_strategy(1..20), u in vec_strategy(1..20)) {
        let j = jsd_objective(&DiscriminatorScores::new(p.clone(), u.clone())).unwrap();
        prop_assert!(j <= 0.0);
        prop_assert!((j - naive_negative_bce(&p, &u)).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_stable_and_exact(k in -700.0f64..700.0) {
        let s = softplus_phi(k);
        prop_assert!(s.is_finite() && s >= 0.0 && s >= k);
        if k.abs() < 30.0 {
            prop_assert!((s - k.exp().ln_1p()).abs() < 1e-12);
        }
    }

    #[test]
    fn cyclic_permutation_has_no_fixed_points(b in 2usize..64, off in 1usize..64) {
        let off = 1 + (off - 1) % (b - 1);
        let p = cyclic_permutation(b, off);
        let mut seen = p.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..b).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }
}

fn tiny_config() -> ModelConfig {
    let mut c = mimseq::checks::gradcheck_model_config();
    c.classes = 4;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn frame_weights_are_nonnegative(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let cfg = tiny_config();
        let heads = Heads { lmim: false, gmim: true };
        let model = SequenceModel::<f64>::new(cfg.clone(), heads, seed).unwrap();
        let batch = mimseq::checks::random_batch(&cfg, 2, seed);
        let refs: Vec<_> = batch.iter().collect();
        let mut x = mimseq::model::batch_frames::<f64>(&refs).unwrap();
        x.data_mut().iter_mut().for_each(|v| *v = (*v - 0.5) * scale);
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = model.forward(&mut g, xv, &mut Mode::Eval).unwrap();
        let beta = g.value(out.beta.unwrap());
        prop_assert_eq!(beta.shape(), &[2, cfg.frames]);
        prop_assert!(beta.data().iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_separable(seed in any::<u64>()) {
        let cfg = tiny_config();
        let model = SequenceModel::<f64>::new(cfg.clone(), Heads { lmim: true, gmim: true }, seed).unwrap();
        let batch = mimseq::checks::random_batch(&cfg, 2, seed);
        let run = |seqs: &[&mimseq::model::VideoSequence]| {
            let mut g = Graph::new();
            let x = g.input(mimseq::model::batch_frames::<f64>(seqs).unwrap());
            let out = model.forward(&mut g, x, &mut Mode::Eval).unwrap();
            (g.value(out.feature_maps).data().to_vec(), g.value(out.logits).data().to_vec())
        };
        let both = run(&[&batch[0], &batch[1]]);
        prop_assert_eq!(&both, &run(&[&batch[0], &batch[1]]));
        let (m0, l0) = run(&[&batch[0]]);
        let (m1, l1) = run(&[&batch[1]]);
        let maps: Vec<f64> = m0.into_iter().chain(m1).collect();
        let logits: Vec<f64> = l0.into_iter().chain(l1).collect();
        prop_assert!(maps.iter().zip(&both.0).all(|(a, b)| (a - b).abs() < 1e-6));
        prop_assert!(logits.iter().zip(&both.1).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
