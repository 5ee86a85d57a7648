use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(DEFAULT_LR, DEFAULT_BETAS)
    }
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Adam {
            lr,
            betas,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if let Some(missing) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(missing));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.take().unwrap();
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
