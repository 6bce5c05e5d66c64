use super::graph::{Graph, Var};
use super::param::ParamStore;
use super::rng::RngStream;
use super::TensorError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many randomly chosen elements per parameter.
    pub max_elements_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            max_elements_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub elements: Vec<ElementCheck>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

impl GradCheckReport {
    fn from_pairs(tolerance: f64, pairs: Vec<(String, usize, f64, f64)>) -> Self {
        let elements = pairs
            .into_iter()
            .map(|(param, index, analytic, numeric)| {
                let rel_error = relative_error(analytic, numeric);
                ElementCheck {
                    param,
                    index,
                    analytic,
                    numeric,
                    rel_error,
                    passed: rel_error < tolerance,
                }
            })
            .collect();
        Self { tolerance, elements }
    }

    pub fn passed(&self) -> bool {
        self.elements.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.elements.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ElementCheck> {
        self.elements.iter().filter(|e| !e.passed)
    }

    /// `(parameter name, max relative error, passed)` in first-seen order.
    pub fn per_param(&self) -> Vec<(String, f64, bool)> {
        let mut out: Vec<(String, f64, bool)> = Vec::new();
        for e in &self.elements {
            match out.iter_mut().find(|(n, _, _)| *n == e.param) {
                Some(entry) => {
                    entry.1 = entry.1.max(e.rel_error);
                    entry.2 &= e.passed;
                }
                None => out.push((e.param.clone(), e.rel_error, e.passed)),
            }
        }
        out
    }

    /// Same probes with every analytic gradient multiplied by `factor`.
    pub fn with_scaled_analytic(&self, factor: f64) -> Self {
        Self::from_pairs(
            self.tolerance,
            self.elements
                .iter()
                .map(|e| (e.param.clone(), e.index, e.analytic * factor, e.numeric))
                .collect(),
        )
    }
}

/// Compares reverse-mode gradients of a scalar function of the store's
/// parameters against central finite differences. `f` must be deterministic.
pub fn grad_check<Func>(store: &mut ParamStore<f64>, mut f: Func, opts: &GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    Func: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut rng = RngStream::new(opts.seed, 0x6772_6164);
    let mut pairs = Vec::new();
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let indices: Vec<usize> = match opts.max_elements_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let analytic = grads.param(id).map(|t| t.data()[i]).unwrap_or(0.0);
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            pairs.push((store.get(id).name.clone(), i, analytic, numeric));
        }
    }
    Ok(GradCheckReport::from_pairs(opts.tolerance, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_function_passes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_fn(&[3], |i| i as f64)).unwrap();
        let report = grad_check(
            &mut s,
            |g, _| Ok(g.input(Tensor::scalar(4.0))),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.elements.iter().all(|e| e.analytic == 0.0 && e.numeric == 0.0));
    }

    #[test]
    fn parameter_loaded_twice_sums_both_uses() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap()).unwrap();
        let report = grad_check(
            &mut s,
            |g, st| {
                let a = g.param(st, id);
                let b = g.param(st, id);
                let y = g.tanh(b);
                let y = g.mul(a, y)?;
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.elements);
    }

    #[test]
    fn scaled_gradient_is_caught() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap()).unwrap();
        let report = grad_check(
            &mut s,
            |g, st| {
                let w = g.param(st, id);
                let y = g.tanh(w);
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.elements);
        let bad = report.with_scaled_analytic(1.01);
        for e in &bad.elements {
            assert!((e.rel_error - 0.01 / 2.01).abs() < 1e-6, "{}", e.rel_error);
        }
        assert!(!bad.passed());
    }

    #[test]
    fn relative_error_formula() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }
}
