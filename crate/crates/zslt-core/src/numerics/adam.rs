//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState<T: Scalar> {
    pub hyper: AdamHyper,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[Vec<usize>], hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }

    /// One Adam update over a parameter list and matching gradient list.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam step over {} params / {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::from_f64(self.hyper.beta1);
        let b2 = T::from_f64(self.hyper.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.hyper.beta1.powf(t));
        let corr2 = T::from_f64(1.0 - self.hyper.beta2.powf(t));
        let lr = T::from_f64(self.hyper.lr);
        let eps = T::from_f64(self.hyper.epsilon);

        for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[idx].shape() {
                return Err(Error::shape(
                    "adam_step",
                    super::tensor::fmt_shape(p.shape()),
                    super::tensor::fmt_shape(g.shape()),
                ));
            }
            let gd = g.data().to_vec();
            let md = self.m[idx].data_mut();
            let vd = self.v[idx].data_mut();
            let pd = p.data_mut();
            for j in 0..gd.len() {
                md[j] = b1 * md[j] + (one - b1) * gd[j];
                vd[j] = b2 * vd[j] + (one - b2) * gd[j] * gd[j];
                let m_hat = md[j] / corr1;
                let v_hat = vd[j] / corr2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.check_finite("adam_step")?;
        }
        Ok(())
    }
}
