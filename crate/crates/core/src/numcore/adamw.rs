//! AdamW with decoupled weight decay.

use indexmap::IndexMap;

use super::params::{ParamGrads, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!("adamw lr {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adamw betas must lie in [0,1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("adamw eps/weight_decay"));
        }
        Ok(())
    }
}

/// Optimizer state: step count plus first/second moments shaped like the
/// trainable parameters they track.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let moments = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| {
                let shape = e.tensor.shape();
                (
                    name.to_string(),
                    (Tensor::zeros(shape), Tensor::zeros(shape)),
                )
            })
            .collect();
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    /// One decoupled-weight-decay AdamW update. Gradients must shape-match
    /// and be finite; missing gradients are treated as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<()> {
        for (name, g) in &grads.by_name {
            if !g.all_finite() {
                return Err(Error::numeric(
                    format!("adamw_step parameter {name:?}"),
                    "non-finite gradient".to_string(),
                ));
            }
            match self.moments.get(name) {
                Some((m, _)) if m.shape() != g.shape() => {
                    return Err(Error::shape(format!(
                        "gradient for {name:?} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        m.shape()
                    )));
                }
                Some(_) => {}
                None => {
                    return Err(Error::invalid(format!(
                        "gradient for unknown/frozen parameter {name:?}"
                    )));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let lr = T::from_f64(c.lr);
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let eps = T::from_f64(c.eps);
        let wd = T::from_f64(c.weight_decay);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let one = T::one();

        for (name, (m, v)) in self.moments.iter_mut() {
            let zero_grad;
            let g = match grads.by_name.get(name) {
                Some(g) => g,
                None => {
                    zero_grad = Tensor::zeros(m.shape());
                    &zero_grad
                }
            };
            let mut theta = params.get(name)?.clone();
            {
                let td = theta.data_mut();
                let md = m.data_mut();
                let vd = v.data_mut();
                let gd = g.data();
                for i in 0..td.len() {
                    let gi = gd[i];
                    md[i] = b1 * md[i] + (one - b1) * gi;
                    vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                    let m_hat = md[i] / bc1;
                    let v_hat = vd[i] / bc2;
                    td[i] = td[i] - lr * wd * td[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            params.set(name, theta)?;
        }
        Ok(())
    }
}
