use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named learnable tensors with their gradients and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

/// Serializable snapshot of parameter values, in registration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub params: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Resets every gradient to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
                None => p.grad = Some(vec![0.0; p.value.len()]),
            }
        }
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.len() != p.value.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let slot = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        slot.iter_mut().zip(g).for_each(|(s, x)| *s += x);
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            params: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Overwrites values from `snap`; names and shapes must match exactly.
    pub fn load(&mut self, snap: &Snapshot) -> Result<()> {
        if snap.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                snap.params.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(&snap.params) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        store.step += 1;
        let t = store.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in &mut store.params {
            let g = p.grad.as_mut().expect("checked above");
            for (((x, gi), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.iter_mut())
                .zip(&mut p.m)
                .zip(&mut p.v)
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * *gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * *gi * *gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                *gi = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x));
        (s, id)
    }

    #[test]
    fn zero_grad_leaves_param() {
        let (mut s, id) = scalar_store(3.0);
        s.zero_grad();
        Adam::new(0.1).step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 3.0);
    }

    #[test]
    fn missing_grad_is_error() {
        let (mut s, _) = scalar_store(1.0);
        assert!(matches!(Adam::default().step(&mut s), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn constant_grad_moves_against_sign() {
        let (mut s, id) = scalar_store(0.0);
        let adam = Adam::new(1e-2);
        for _ in 0..100 {
            s.zero_grad();
            s.add_grad(id, &[0.7]).unwrap();
            adam.step(&mut s).unwrap();
        }
        assert!(s.value(id).item() < -0.5);
        assert_eq!(s.grad(id).unwrap(), &[0.0]);
    }

    #[test]
    fn load_rejects_mismatched_snapshot() {
        let (mut s, _) = scalar_store(1.0);
        let mut other = ParamStore::new();
        other.add("y", Tensor::scalar(2.0));
        assert!(s.load(&other.snapshot()).is_err());
        let (src, _) = scalar_store(5.0);
        s.load(&src.snapshot()).unwrap();
        assert_eq!(s.snapshot(), src.snapshot());
    }
}
