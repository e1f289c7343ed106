//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamW {
    /// Moment buffers shaped like `shapes`, in parameter order.
    pub fn new(cfg: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= c.lr * (update + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig { lr: 0.1, weight_decay: wd, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let mut opt = AdamW::new(cfg(0.0), &[(1, 2)]);
        opt.step(&mut [&mut p], &[Matrix::from_vec(1, 2, vec![3.0, -0.5]).unwrap()]).unwrap();
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut p = Matrix::filled(1, 1, 2.0);
        let mut opt = AdamW::new(cfg(0.5), &[(1, 1)]);
        opt.step(&mut [&mut p], &[Matrix::zeros(1, 1)]).unwrap();
        assert!((p.get(0, 0) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Matrix::filled(1, 1, 5.0);
        let mut opt = AdamW::new(cfg(0.0), &[(1, 1)]);
        for _ in 0..500 {
            let g = Matrix::filled(1, 1, 2.0 * (p.get(0, 0) - 1.0));
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!((p.get(0, 0) - 1.0).abs() < 1e-2);
    }
}
