//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f32>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = m.clone();
        Self { step: 0, m, v }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update using each parameter's `grad` slot; parameters without a
/// gradient are treated as having a zero gradient.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(TensorError::Dimension(format!(
            "{} parameters for optimizer state of {}",
            params.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(TensorError::Dimension(format!(
                "parameter {i} has {} values, state has {}",
                p.numel(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.grad().map(<[f32]>::to_vec) else {
            // zero gradient still decays the moments
            decay(&mut state.m[i], &mut state.v[i], cfg);
            apply(p.data_mut(), &state.m[i], &state.v[i], bc1, bc2, cfg);
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        }
        apply(p.data_mut(), m, v, bc1, bc2, cfg);
    }
    Ok(())
}

fn decay(m: &mut [f32], v: &mut [f32], cfg: &AdamConfig) {
    m.iter_mut().for_each(|x| *x *= cfg.beta1);
    v.iter_mut().for_each(|x| *x *= cfg.beta2);
}

fn apply(data: &mut [f32], m: &[f32], v: &[f32], bc1: f32, bc2: f32, cfg: &AdamConfig) {
    for j in 0..data.len() {
        let mh = m[j] / bc1;
        let vh = v[j] / bc2;
        data[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}
