//! Layer-wise learning rates, moving-average weights and FGM perturbation.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adam with bias correction (beta1 0.9, beta2 0.999).
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    /// Learning-rate attenuation per layer below the top: a parameter at
    /// depth `d` moves with `base_lr * layer_decay^d`.
    pub layer_decay: f64,
    pub ema_decay: f64,
    pub fgm_epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            base_lr: 3e-3,
            layer_decay: 0.95,
            ema_decay: 0.999,
            fgm_epsilon: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config("layer_decay", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1)"));
        }
        if !(self.fgm_epsilon >= 0.0 && self.fgm_epsilon.is_finite()) {
            return Err(Error::config("fgm_epsilon", "must be non-negative"));
        }
        Ok(())
    }

    pub fn effective_lr(&self, depth: usize) -> f64 {
        self.base_lr * self.layer_decay.powi(depth as i32)
    }
}

/// Optimizer state: Adam moments and the moving-average shadow weights.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shadow: Vec<Tensor>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = params.iter().map(|(_, p)| p.value.len()).collect();
        Ok(Optimizer {
            cfg,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            shadow: params.iter().map(|(_, p)| p.value.clone()).collect(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    /// Overwrites the shadow weights, e.g. to seed a moving average from a
    /// known state.
    pub fn set_shadow(&mut self, id: ParamId, value: Tensor) {
        self.shadow[id.index()] = value;
    }

    /// Applies one update from the gradients currently stored in `params`,
    /// then folds the new weights into the moving average.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for p in params.iter_mut() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.cfg.clone();
        for (i, p) in params.iter_mut().enumerate() {
            let lr = cfg.effective_lr(p.depth);
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in value.iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    for j in 0..value.len() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * grad[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * grad[j] * grad[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        value[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
            let decay = cfg.ema_decay;
            for (s, w) in self.shadow[i].data_mut().iter_mut().zip(p.value.data()) {
                *s = decay * *s + (1.0 - decay) * w;
            }
        }
        Ok(())
    }

    /// A copy of `params` holding the moving-average weights.
    pub fn shadow_params(&self, params: &ParamStore) -> ParamStore {
        let mut out = params.clone();
        for (p, s) in out.iter_mut().zip(&self.shadow) {
            p.value = s.clone();
        }
        out
    }
}

/// Fast-gradient-method perturbation: `embedding + epsilon * grad / ||grad||`.
///
/// Returns the embedding unchanged when the gradient is zero or `epsilon`
/// is zero.
pub fn fgm_perturb(embedding: &Tensor, grad: &Tensor, epsilon: f64) -> Result<Tensor> {
    if embedding.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "fgm embedding {:?} vs grad {:?}",
            embedding.shape(),
            grad.shape()
        )));
    }
    let norm = grad.l2_norm();
    if norm == 0.0 || epsilon == 0.0 {
        return Ok(embedding.clone());
    }
    let data = embedding
        .data()
        .iter()
        .zip(grad.data())
        .map(|(e, g)| e + epsilon * g / norm)
        .collect();
    Tensor::new(embedding.shape().to_vec(), data)
}

/// Applies [`fgm_perturb`] to a parameter in place and returns the original
/// value so it can be restored after the adversarial pass.
pub fn fgm_attack(params: &mut ParamStore, id: ParamId, epsilon: f64) -> Result<Tensor> {
    let original = params.value(id).clone();
    let perturbed = fgm_perturb(&original, params.grad(id), epsilon)?;
    params.get_mut(id).value = perturbed;
    Ok(original)
}

pub fn fgm_restore(params: &mut ParamStore, id: ParamId, original: Tensor) {
    params.get_mut(id).value = original;
}
