//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::segnet::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Weight decay `lr · weight_decay · p` applies to convolution
    /// kernels only (names ending in `.w`).
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("gradient list does not match the parameters"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decays: Vec<bool> = params.names().iter().map(|n| n.ends_with(".w")).collect();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {i} has shape {:?}", g.shape())));
            }
            let wd = if decays[i] { weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *pv);
            }
        }
        Ok(())
    }

    pub fn to_bundle(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (name, m) in params.names().iter().zip(&self.m) {
            out.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in params.names().iter().zip(&self.v) {
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out.push(("adam.step".to_string(), Tensor::scalar(self.step as f64)));
        out
    }

    pub fn from_bundle(params: &ParamStore, entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: String, shape: &[usize]| -> Result<Tensor> {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::CheckpointShape {
                    name,
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t.clone())
        };
        let mut adam = Adam::new(params);
        for (i, (name, p)) in params.names().iter().zip(params.tensors()).enumerate() {
            adam.m[i] = get(format!("adam.m.{name}"), p.shape())?;
            adam.v[i] = get(format!("adam.v.{name}"), p.shape())?;
        }
        adam.step = get("adam.step".to_string(), &[1])?.data()[0] as u64;
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegNetConfig;

    fn tiny() -> ParamStore {
        ParamStore::init(&SegNetConfig {
            feature_dim: 2,
            skip_dim: 2,
            maskprop_dim: 2,
            fusion_dim: 2,
            refine_dim: 2,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = tiny();
        let before = p.clone();
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::full(t.shape(), 0.3)).collect();
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &grads, 0.01, 0.0).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::full(t.shape(), -2.0)).collect();
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &grads, 0.0, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_shrinks_kernels_only() {
        let mut p = tiny();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &grads, 0.1, 0.5).unwrap();
        for (name, t) in p.names().iter().zip(p.tensors()) {
            let expected = if name.ends_with(".w") { 0.95 } else { 1.0 };
            assert!(t.data().iter().all(|&v| (v - expected).abs() < 1e-15), "{name}");
        }
    }

    #[test]
    fn bundle_round_trip() {
        let mut p = tiny();
        let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::full(t.shape(), 0.5)).collect();
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &grads, 0.01, 0.0).unwrap();
        let back = Adam::from_bundle(&p, &adam.to_bundle(&p)).unwrap();
        assert_eq!(back, adam);
    }
}
