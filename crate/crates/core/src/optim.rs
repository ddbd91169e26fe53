//! Adam with bias correction, one state per parameter group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamId};
use crate::error::OptimError;
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |msg: String| Err(OptimError::InvalidHyperparameter(msg));
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1 = {} outside [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 = {} outside [0, 1)", self.beta2));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps = {} must be positive", self.eps));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Moment estimates and step counter for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl AdamState {
    /// Fresh state (m = v = 0, t = 0) tracking the given parameters.
    pub fn new<'a>(
        params: impl IntoIterator<Item = (ParamId, &'a Tensor)>,
        config: AdamConfig,
    ) -> Result<Self, OptimError> {
        config.validate()?;
        let moments = params
            .into_iter()
            .map(|(id, p)| (id, Moments { m: Tensor::zeros(p.shape()), v: Tensor::zeros(p.shape()) }))
            .collect();
        Ok(AdamState { config, t: 0, moments })
    }

    /// One Adam update. Parameters without a gradient keep their values and
    /// moments; the step counter advances once per call.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<(), OptimError> {
        // Validate everything first so a bad gradient leaves no partial update.
        for (id, g) in grads {
            let mom = self.moments.get(id).ok_or(OptimError::UnknownParam(*id))?;
            let p = params.get(*id).ok_or(OptimError::UnknownParam(*id))?;
            if g.shape() != p.shape() || mom.m.shape() != p.shape() {
                return Err(OptimError::ShapeMismatch {
                    id: *id,
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let mom = self.moments.get_mut(id).expect("validated above");
            let p = params.get_mut(*id).expect("validated above");
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
