use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::mlp::{MlpParams, ParamGrads};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        Self {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected step. Non-finite gradients leave both state and
    /// parameters untouched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &ParamGrads) -> Result<()> {
        if grads.layers.len() != params.layers().len()
            || grads
                .layers
                .iter()
                .zip(params.layers())
                .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.len() != p.bias.len())
        {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numerical {
                row: 0,
                what: "optimizer received non-finite gradient".into(),
            });
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        for (((p, g), m), v) in params
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let upd = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            };
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(upd);
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(upd);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and optimizer state.
pub fn adam_step(
    opt: &OptimState,
    params: &MlpParams,
    grads: &ParamGrads,
) -> Result<(MlpParams, OptimState)> {
    let mut p = params.clone();
    let mut o = opt.clone();
    o.step(&mut p, grads)?;
    Ok((p, o))
}
