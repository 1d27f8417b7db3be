//! Adam with decoupled weight decay and the per-epoch cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Float, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr · ½(1 + cos(π·epoch/epochs))`, defined for `0 ≤ epoch ≤ epochs`.
pub fn cosine_lr(epoch: usize, epochs: usize, base_lr: f64) -> Result<f64> {
    if epochs == 0 || epoch > epochs {
        return Err(Error::config(
            "train.epochs",
            format!("epoch {epoch} is outside 0..={epochs}"),
        ));
    }
    let t = epoch as f64 / epochs as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// First and second moments for every parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update from the gradients held in `store`. Weight decay is applied
    /// first as `θ ← θ − lr·wd·θ`, outside the moment estimates.
    pub fn step(&mut self, store: &mut ParamStore<T>, hyper: AdamHyper) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::LengthMismatch {
                what: "adam moments vs parameters",
                left: self.m.len(),
                right: store.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(ADAM_EPS));
        let (one, lr) = (T::one(), T::of(hyper.lr));
        let decay = T::of(1.0 - hyper.lr * hyper.weight_decay);
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), m.shape()));
            }
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                if hyper.weight_decay != 0.0 {
                    *theta = *theta * decay;
                }
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(theta)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-4).is_err());
        assert!(cosine_lr(0, 0, 1e-4).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        let mut adam = AdamState::new(&s);
        adam.step(
            &mut s,
            AdamHyper {
                lr: 0.1,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        // m̂ = v̂ = 1, so θ = 1 − 0.1·1/(1 + 1e-8).
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.iter().next().unwrap().1.value.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.37, 0.0);
        let mut adam = AdamState::new(&s);
        for _ in 0..5 {
            adam.step(
                &mut s,
                AdamHyper {
                    lr: 0.1,
                    weight_decay: 0.0,
                },
            )
            .unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 0.37);
    }

    #[test]
    fn decay_only_scales_geometrically() {
        let mut s = scalar_store(2.0, 0.0);
        let mut adam = AdamState::new(&s);
        let mut expect = 2.0;
        for _ in 0..3 {
            adam.step(
                &mut s,
                AdamHyper {
                    lr: 0.1,
                    weight_decay: 1e-5,
                },
            )
            .unwrap();
            expect *= 1.0 - 1e-6;
        }
        assert!((s.iter().next().unwrap().1.value.data()[0] - expect).abs() < 1e-15);
    }
}
