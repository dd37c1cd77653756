use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Scalar, Tensor};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base * decay^floor(epoch / every)`.
pub fn lr_schedule(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

/// Moments and step count of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Adam state. Each parameter keeps its own step count and is only
/// touched by steps in which it received a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<AdamSlot<T>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(BETA1, BETA2, ADAM_EPS)
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn slot(&self, id: ParamId) -> Option<&AdamSlot<T>> {
        self.slots.get(id.index()).and_then(Option::as_ref)
    }

    pub fn set_slot(&mut self, id: ParamId, slot: AdamSlot<T>) {
        if self.slots.len() <= id.index() {
            self.slots.resize(id.index() + 1, None);
        }
        self.slots[id.index()] = Some(slot);
    }

    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &AdamSlot<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i), s)))
    }

    /// One bias-corrected Adam update for every `(id, grad)` pair. Fails
    /// before touching anything if a gradient is not finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
    ) -> Result<(), TrainError> {
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() {
                return Err(TrainError::GradientShape(store.name(*id).to_string()));
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one, eps) = (T::one(), T::from_f64(self.eps));
        for (id, g) in grads {
            if self.slot(*id).is_none() {
                let z = Tensor::zeros(g.shape());
                self.set_slot(
                    *id,
                    AdamSlot {
                        m: z.clone(),
                        v: z,
                        step: 0,
                    },
                );
            }
            let slot = self.slots[id.index()].as_mut().expect("slot");
            slot.step += 1;
            let t = slot.step as i32;
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            let lr = T::from_f64(lr);
            let theta = store.get_mut(*id);
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| s.insert(format!("p{i}"), Tensor::scalar(v)))
            .collect();
        (s, ids)
    }

    #[test]
    fn first_step_matches_scalar_reference() {
        let (mut s, ids) = store(&[0.0]);
        let mut adam = AdamState::default();
        adam.step(&mut s, &[(ids[0], Tensor::scalar(1.0))], 1e-4)
            .unwrap();
        // m = 0.1, v = 0.001; bias correction gives m_hat = v_hat = 1
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = -1e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((s.get(ids[0]).item() - expected).abs() < 1e-15);
        assert!((s.get(ids[0]).item() + 9.9999e-5).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_zero_update() {
        let (mut s, ids) = store(&[0.7]);
        let mut adam = AdamState::default();
        adam.step(&mut s, &[(ids[0], Tensor::scalar(0.0))], 1e-4)
            .unwrap();
        assert_eq!(s.get(ids[0]).item(), 0.7);
    }

    #[test]
    fn parameters_are_independent() {
        let (mut s, ids) = store(&[1.0, 2.0]);
        let (mut alone, alone_ids) = store(&[1.0]);
        let mut a = AdamState::default();
        let mut b = AdamState::default();
        for _ in 0..3 {
            a.step(
                &mut s,
                &[
                    (ids[0], Tensor::scalar(0.5)),
                    (ids[1], Tensor::scalar(-3.0)),
                ],
                1e-2,
            )
            .unwrap();
            b.step(&mut alone, &[(alone_ids[0], Tensor::scalar(0.5))], 1e-2)
                .unwrap();
        }
        assert_eq!(s.get(ids[0]), alone.get(alone_ids[0]));
    }

    #[test]
    fn untouched_parameter_keeps_no_state() {
        let (mut s, ids) = store(&[1.0, 2.0]);
        let mut a = AdamState::default();
        a.step(&mut s, &[(ids[0], Tensor::scalar(0.5))], 1e-2)
            .unwrap();
        assert!(a.slot(ids[1]).is_none());
        assert_eq!(s.get(ids[1]).item(), 2.0);
        assert_eq!(a.slot(ids[0]).unwrap().step, 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, ids) = store(&[1.0]);
        let mut a = AdamState::default();
        let err = a
            .step(&mut s, &[(ids[0], Tensor::scalar(f64::NAN))], 1e-2)
            .unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(ref n) if n == "p0"));
        assert_eq!(s.get(ids[0]).item(), 1.0);
    }

    #[test]
    fn schedule_steps() {
        let lr = |e| lr_schedule(1e-4, 0.1, 30, e);
        assert_eq!(lr(0), 1e-4);
        assert!((lr(29) - 1e-4).abs() < 1e-20);
        assert!((lr(30) - 1e-5).abs() < 1e-18);
        assert!((lr(59) - 1e-5).abs() < 1e-18);
        assert!((lr(60) - 1e-6).abs() < 1e-19);
    }
}
