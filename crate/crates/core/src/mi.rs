//! Jensen-Shannon mutual-information estimation.
//!
//! The estimator contrasts discriminator scores on paired samples (drawn from
//! the joint) with scores on unpaired samples (drawn from the product of
//! marginals):
//!
//! `I_JSD = E_joint[-φ(-t)] - E_product[φ(t)]`, with `φ(k) = log(1 + e^k)`.
//!
//! Since `-φ(-t) = log σ(t)` and `-φ(t) = log(1 - σ(t))`, the objective is the
//! negative binary cross-entropy of `σ(t)` against targets 1 (paired) and 0
//! (unpaired). It is bounded above by 0 and its supremum over discriminators,
//! attained at `D*(a, b) = p(a, b) / (p(a, b) + p(a) p(b))`, equals
//! `2 JSD(p(A, B) || p(A) p(B)) - 2 log 2`.

use thiserror::Error;

use crate::tensor::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiError {
    #[error("{0} score vector is empty")]
    EmptyScores(&'static str),
    #[error("unpaired sampling needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("joint distribution invalid: {0}")]
    InvalidJoint(String),
}

/// `log(1 + e^k)`, evaluated as `max(k, 0) + log(1 + e^-|k|)` so it never overflows.
pub fn softplus_phi(k: f64) -> f64 {
    k.max(0.0) + (-k.abs()).exp().ln_1p()
}

/// Raw (pre-sigmoid) discriminator outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscriminatorScores {
    pub paired: Vec<f64>,
    pub unpaired: Vec<f64>,
}

impl DiscriminatorScores {
    pub fn new(paired: Vec<f64>, unpaired: Vec<f64>) -> Self {
        Self { paired, unpaired }
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

/// Sample estimate of the Jensen-Shannon MI lower bound. Always `<= 0`.
pub fn jsd_objective(scores: &DiscriminatorScores) -> Result<f64, MiError> {
    if scores.paired.is_empty() {
        return Err(MiError::EmptyScores("paired"));
    }
    if scores.unpaired.is_empty() {
        return Err(MiError::EmptyScores("unpaired"));
    }
    let joint = mean(scores.paired.iter().map(|&t| -softplus_phi(-t)));
    let product = mean(scores.unpaired.iter().map(|&t| softplus_phi(t)));
    Ok(joint - product)
}

/// Cyclic offset in `[1, B-1]` used to build unpaired samples from a batch.
pub fn draw_offset(batch: usize, rng: &mut RngStream) -> Result<usize, MiError> {
    if batch < 2 {
        return Err(MiError::BatchTooSmall(batch));
    }
    Ok(rng.int_in(1, batch - 1))
}

/// Label permutation for a cyclic offset: position `i` receives the label of `(i + k) mod B`.
pub fn cyclic_permutation(batch: usize, offset: usize) -> Vec<usize> {
    (0..batch).map(|i| (i + offset) % batch).collect()
}

/// Pairs every feature with the label of a different batch position,
/// shifted by one random cyclic offset (no sample keeps its own position).
pub fn sample_unpaired<A: Clone, L: Clone>(batch: &[(A, L)], rng: &mut RngStream) -> Result<Vec<(A, L)>, MiError> {
    let k = draw_offset(batch.len(), rng)?;
    Ok(cyclic_permutation(batch.len(), k)
        .into_iter()
        .zip(batch)
        .map(|(j, (f, _))| (f.clone(), batch[j].1.clone()))
        .collect())
}

/// Joint probability table over two finite alphabets.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self, MiError> {
        let rows = table.len();
        let cols = table.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(MiError::InvalidJoint("empty table".into()));
        }
        if table.iter().any(|r| r.len() != cols) {
            return Err(MiError::InvalidJoint("ragged rows".into()));
        }
        let probs: Vec<f64> = table.into_iter().flatten().collect();
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(MiError::InvalidJoint("negative or non-finite entry".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MiError::InvalidJoint(format!("entries sum to {total}, not 1")));
        }
        Ok(Self { rows, cols, probs })
    }

    /// One `(a, b)` draw by inverse-CDF over the cells.
    pub fn sample(&self, rng: &mut RngStream) -> (usize, usize) {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return (i / self.cols, i % self.cols);
            }
        }
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        (last / self.cols, last % self.cols)
    }

    /// Random joint with strictly positive entries.
    pub fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Self {
        let raw: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(0.05, 1.0).powi(2)).collect();
        let total: f64 = raw.iter().sum();
        Self {
            rows,
            cols,
            probs: raw.into_iter().map(|p| p / total).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn p(&self, a: usize, b: usize) -> f64 {
        self.probs[a * self.cols + b]
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|a| (0..self.cols).map(|b| self.p(a, b)).sum())
            .collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|b| (0..self.rows).map(|a| self.p(a, b)).sum())
            .collect()
    }

    /// `p(a) p(b)` laid out like the joint.
    pub fn product_of_marginals(&self) -> Vec<f64> {
        let (pa, pb) = (self.row_marginal(), self.col_marginal());
        (0..self.rows * self.cols)
            .map(|i| pa[i / self.cols] * pb[i % self.cols])
            .collect()
    }

    /// Relabels the row and column alphabets.
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        let mut probs = vec![0.0; self.probs.len()];
        for a in 0..self.rows {
            for b in 0..self.cols {
                probs[row_perm[a] * self.cols + col_perm[b]] = self.p(a, b);
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            probs,
        }
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Objective value at the optimal discriminator, by enumeration of every cell.
pub fn optimal_discrete_estimate(joint: &DiscreteJoint) -> f64 {
    let q = joint.product_of_marginals();
    joint
        .probs
        .iter()
        .zip(&q)
        .filter(|(&p, &q)| p + q > 0.0)
        .map(|(&p, &q)| {
            let d = p / (p + q);
            xlogy(p, d) + xlogy(q, 1.0 - d)
        })
        .sum()
}

/// Objective under exact expectations for a table of raw scores.
pub fn expected_objective(joint: &DiscreteJoint, scores: &[f64]) -> f64 {
    let q = joint.product_of_marginals();
    joint
        .probs
        .iter()
        .zip(&q)
        .zip(scores)
        .map(|((&p, &q), &t)| -p * softplus_phi(-t) - q * softplus_phi(t))
        .sum()
}

/// One raw score per cell of a joint table.
#[derive(Clone, Debug)]
pub struct TabularDiscriminator {
    pub scores: Vec<f64>,
}

impl TabularDiscriminator {
    pub fn zeros(joint: &DiscreteJoint) -> Self {
        Self {
            scores: vec![0.0; joint.rows * joint.cols],
        }
    }

    /// Gradient ascent on the exact-expectation objective. The partial
    /// derivative for a cell is `p σ(-t) - q σ(t)`.
    pub fn fit(&mut self, joint: &DiscreteJoint, steps: usize, lr: f64) -> f64 {
        let q = joint.product_of_marginals();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for _ in 0..steps {
            for ((t, &p), &qv) in self.scores.iter_mut().zip(&joint.probs).zip(&q) {
                // Cells are independent; normalizing by their mass keeps the step size uniform.
                let mass = (p + qv).max(1e-12);
                *t += lr * (p * sig(-*t) - qv * sig(*t)) / mass;
            }
        }
        expected_objective(joint, &self.scores)
    }

    /// Stochastic training from sampled batches: paired draws from the joint,
    /// unpaired draws built in-batch by [`sample_unpaired`]. Plain SGD on the
    /// mean objective of each batch.
    pub fn fit_samples(&mut self, joint: &DiscreteJoint, steps: usize, batch: usize, lr: f64, rng: &mut RngStream) -> Result<(), MiError> {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut grad = vec![0.0; self.scores.len()];
        for _ in 0..steps {
            let paired: Vec<(usize, usize)> = (0..batch).map(|_| joint.sample(rng)).collect();
            let unpaired = sample_unpaired(&paired, rng)?;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / batch as f64;
            for &(a, b) in &paired {
                let i = a * joint.cols + b;
                grad[i] += w * sig(-self.scores[i]);
            }
            for &(a, b) in &unpaired {
                let i = a * joint.cols + b;
                grad[i] -= w * sig(self.scores[i]);
            }
            self.scores.iter_mut().zip(&grad).for_each(|(t, g)| *t += lr * g);
        }
        Ok(())
    }

    /// Estimate from explicit samples: scores looked up for paired and unpaired draws.
    pub fn sample_scores(&self, joint: &DiscreteJoint, paired: &[(usize, usize)], unpaired: &[(usize, usize)]) -> DiscriminatorScores {
        let at = |&(a, b): &(usize, usize)| self.scores[a * joint.cols + b];
        DiscriminatorScores::new(paired.iter().map(at).collect(), unpaired.iter().map(at).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn softplus_closed_forms() {
        assert!((softplus_phi(0.0) - LN2).abs() < 1e-15);
        assert!((softplus_phi(50.0) - 50.0).abs() < 1e-9);
        let tiny = softplus_phi(-50.0);
        assert!((tiny - (-50.0f64).exp()).abs() < 1e-30);
        assert!(softplus_phi(1000.0).is_finite());
    }

    #[test]
    fn jsd_examples() {
        let zero = DiscriminatorScores::new(vec![0.0; 4], vec![0.0; 3]);
        assert!((jsd_objective(&zero).unwrap() + 2.0 * LN2).abs() < 1e-12);

        let l3 = 3f64.ln();
        let s = DiscriminatorScores::new(vec![l3], vec![-l3]);
        assert!((jsd_objective(&s).unwrap() + 2.0 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((jsd_objective(&s).unwrap() + 0.575364).abs() < 1e-6);

        let far = DiscriminatorScores::new(vec![60.0], vec![-60.0]);
        assert!(jsd_objective(&far).unwrap().abs() < 1e-20);
    }

    #[test]
    fn jsd_rejects_empty() {
        assert_eq!(
            jsd_objective(&DiscriminatorScores::new(vec![], vec![1.0])),
            Err(MiError::EmptyScores("paired"))
        );
        assert_eq!(
            jsd_objective(&DiscriminatorScores::new(vec![1.0], vec![])),
            Err(MiError::EmptyScores("unpaired"))
        );
    }

    #[test]
    fn two_element_batch_swaps_labels() {
        let batch = vec![("f1", "y1"), ("f2", "y2")];
        let mut rng = RngStream::new(0, 0);
        let out = sample_unpaired(&batch, &mut rng).unwrap();
        assert_eq!(out, vec![("f1", "y2"), ("f2", "y1")]);
    }

    #[test]
    fn single_element_batch_rejected() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(
            sample_unpaired(&[(1, 2)], &mut rng),
            Err(MiError::BatchTooSmall(1))
        );
    }

    #[test]
    fn unpaired_labels_come_from_other_positions() {
        let batch: Vec<(usize, usize)> = (0..8).map(|i| (i, i)).collect();
        let mut rng = RngStream::new(5, 9);
        for _ in 0..50 {
            let out = sample_unpaired(&batch, &mut rng).unwrap();
            assert!(out.iter().all(|(f, y)| f != y));
            let mut labels: Vec<usize> = out.iter().map(|p| p.1).collect();
            labels.sort_unstable();
            assert_eq!(labels, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn joint_validation() {
        assert!(DiscreteJoint::new(vec![vec![0.5, 0.5], vec![0.1, 0.0]]).is_err());
        assert!(DiscreteJoint::new(vec![vec![0.5, -0.1], vec![0.6, 0.0]]).is_err());
        assert!(DiscreteJoint::new(vec![vec![0.5], vec![0.25, 0.25]]).is_err());
        assert!(DiscreteJoint::new(vec![]).is_err());
    }

    #[test]
    fn optimal_estimate_independent_uniform() {
        let j = DiscreteJoint::new(vec![vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap();
        assert!((optimal_discrete_estimate(&j) + 2.0 * LN2).abs() < 1e-12);
    }

    /// Shannon-entropy route: 2 JSD(P || Q) - 2 log 2 with JSD(P || Q) = H(M) - (H(P) + H(Q)) / 2.
    fn via_entropies(j: &DiscreteJoint) -> f64 {
        let q = j.product_of_marginals();
        let h = |v: &[f64]| -v.iter().map(|&x| xlogy(x, x)).sum::<f64>();
        let m: Vec<f64> = j.probs.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
        let jsd = h(&m) - 0.5 * (h(&j.probs) + h(&q));
        2.0 * jsd - 2.0 * LN2
    }

    #[test]
    fn optimal_estimate_matches_entropy_identity() {
        let diag = DiscreteJoint::new(vec![vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        // 2 * (0.5 ln(2/3) + 0.25 ln(1/3))
        let expect = 2.0 * (0.5 * (2.0f64 / 3.0).ln() + 0.25 * (1.0f64 / 3.0).ln());
        assert!((optimal_discrete_estimate(&diag) - expect).abs() < 1e-12);
        assert!((optimal_discrete_estimate(&diag) + 0.9548).abs() < 1e-4);
        let mixed = DiscreteJoint::new(vec![vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        let mut rng = RngStream::new(1, 2);
        for j in [diag, mixed, DiscreteJoint::random(4, 4, &mut rng), DiscreteJoint::random(3, 5, &mut rng)] {
            assert!((optimal_discrete_estimate(&j) - via_entropies(&j)).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_estimate_is_relabeling_invariant() {
        let mut rng = RngStream::new(3, 3);
        let j = DiscreteJoint::random(3, 4, &mut rng);
        let p = j.permuted(&[2, 0, 1], &[3, 1, 0, 2]);
        assert!((optimal_discrete_estimate(&j) - optimal_discrete_estimate(&p)).abs() < 1e-12);
    }

    #[test]
    fn tabular_fit_approaches_supremum() {
        let j = DiscreteJoint::new(vec![vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        let mut d = TabularDiscriminator::zeros(&j);
        let value = d.fit(&j, 2000, 0.5);
        assert!(value <= optimal_discrete_estimate(&j) + 1e-12);
        assert!((value - optimal_discrete_estimate(&j)).abs() < 1e-6);
    }
}
