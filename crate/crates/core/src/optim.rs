//! AdamW with decoupled weight decay and a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    decay: Vec<bool>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    /// One moment buffer per tensor; `decay[i]` enables weight decay for tensor `i`.
    pub fn new(cfg: AdamWConfig, sizes: &[usize], decay: Vec<bool>) -> Self {
        assert_eq!(sizes.len(), decay.len());
        Self {
            cfg,
            step: 0,
            decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Matrix<f32>>, grads: Vec<&Matrix<f32>>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = (1.0 - c.beta1.powi(t)) as f32;
        let bc2 = (1.0 - c.beta2.powi(t)) as f32;
        let (lr, wd, b1, b2, eps) = (
            c.lr as f32,
            c.weight_decay as f32,
            c.beta1 as f32,
            c.beta2 as f32,
            c.eps as f32,
        );
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let decay = if self.decay[i] { lr * wd } else { 0.0 };
            for (((w, &gr), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= decay * *w;
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0f32, -2.0]);
        let g = Matrix::zeros(1, 2);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.5,
                ..Default::default()
            },
            &[2],
            vec![true],
        );
        opt.step(vec![&mut p], vec![&g]);
        // zero gradient: only the decay term moves the weights
        assert!((p.data[0] - 0.95).abs() < 1e-7);
        assert!((p.data[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::from_vec(1, 1, vec![0.0f32]);
        let g = Matrix::from_vec(1, 1, vec![3.0f32]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.01,
                weight_decay: 0.0,
                ..Default::default()
            },
            &[1],
            vec![false],
        );
        opt.step(vec![&mut p], vec![&g]);
        assert!((p.data[0] + 0.01).abs() < 1e-6);
    }
}
