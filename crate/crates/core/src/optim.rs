//! Bias-corrected Adam without weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let mut m = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name, Tensor::zeros(p.shape()));
        }
        Adam {
            cfg,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// One update. Every gradient is checked before any parameter moves, so
    /// a rejected step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::Training {
                name: name.to_string(),
                msg: "no gradient supplied".into(),
            })?;
            if g.shape() != p.shape() {
                return Err(Error::Training {
                    name: name.to_string(),
                    msg: format!("gradient shape {:?} differs from parameter {:?}", g.shape(), p.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    name: name.to_string(),
                    msg: "non-finite gradient".into(),
                });
            }
            if self.m.get(name).is_none() {
                return Err(Error::Training {
                    name: name.to_string(),
                    msg: "parameter unknown to the optimizer".into(),
                });
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let [b1, b2, lr, eps] = [c.beta1, c.beta2, c.lr, c.eps].map(T::from_f64_lossy);
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
