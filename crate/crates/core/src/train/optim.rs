use crate::error::{Error, Result};
use crate::model::SequenceModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates, one buffer per parameter tensor in visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(model: &SequenceModel) -> Self {
        let mut first = Vec::new();
        model.visit_params(&mut |_, p| first.push(vec![0.0; p.len()]));
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    /// One bias-corrected Adam step. Fails without touching anything if any
    /// gradient is non-finite.
    pub fn update(&mut self, model: &mut SequenceModel, grads: &SequenceModel, cfg: &AdamConfig) -> Result<()> {
        let mut flat = Vec::new();
        let mut bad = None;
        grads.visit_params(&mut |name, g| {
            if bad.is_none() {
                if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                    bad = Some(format!("non-finite gradient {} at {name}[{pos}]", g[pos]));
                }
            }
            flat.push(g.to_vec());
        });
        if let Some(msg) = bad {
            return Err(Error::Numerics(msg));
        }
        if flat.len() != self.first.len() || flat.iter().zip(&self.first).any(|(g, m)| g.len() != m.len()) {
            return Err(Error::Shape("gradient layout does not match optimizer state".into()));
        }
        self.step += 1;
        let step = self.step;
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params_mut(&mut |_, p| {
            adam_step(p, &flat[idx], &mut first[idx], &mut second[idx], step, cfg);
            idx += 1;
        });
        Ok(())
    }
}

/// Applies step number `step` (1-based) of Adam to one parameter buffer.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}
