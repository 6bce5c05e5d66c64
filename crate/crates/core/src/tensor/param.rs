use std::collections::HashMap;

use super::array::Tensor;
use super::graph::Gradients;
use super::scalar::Real;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    /// Frozen parameters enter graphs as constants and are skipped by optimizers.
    pub frozen: bool,
}

/// Ordered collection of parameters addressed by id or by dotted name path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId, TensorError> {
        self.id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Adds the gradients of one backward pass into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut count = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
                count += 1;
            }
        }
        count
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }

    /// Copies every parameter of `other` whose name exists here with the same shape.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore<F>) -> usize {
        let mut copied = 0;
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                let dst = &mut self.params[id.0];
                if dst.value.shape() == p.value.shape() {
                    dst.value = p.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Drops every parameter whose name starts with `prefix`, preserving order of the rest.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for p in &self.params {
            if !p.name.starts_with(prefix) {
                let id = out
                    .insert(&p.name, p.value.clone())
                    .expect("names were unique in the source store");
                out.params[id.0].frozen = p.frozen;
            }
        }
        out
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out
                .insert(&p.name, p.value.cast())
                .expect("names were unique in the source store");
            out.params[id.0].frozen = p.frozen;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::zeros(&[2])),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::ones(&[3])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&s, id);
            let loss = g.sum(w);
            let grads = g.backward(loss).unwrap();
            s.accumulate(&grads);
        }
        assert_eq!(s.get(id).grad.data(), &[2.0, 2.0, 2.0]);
        s.zero_grad();
        assert!(s.get(id).grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.get(id).grad.shape(), s.get(id).value.shape());
    }

    #[test]
    fn prefix_freeze_and_strip() {
        let mut s = ParamStore::<f32>::new();
        s.insert("frontend.a", Tensor::zeros(&[1])).unwrap();
        s.insert("frontend.b", Tensor::zeros(&[1])).unwrap();
        s.insert("backend.a", Tensor::zeros(&[1])).unwrap();
        assert_eq!(s.set_frozen("frontend.", true), 2);
        let stripped = s.without_prefix("frontend.");
        assert_eq!(stripped.len(), 1);
        assert!(stripped.id("backend.a").is_some());
    }
}
