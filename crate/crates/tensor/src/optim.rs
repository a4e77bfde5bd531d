use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, betas: (0.9, 0.999), eps: 1e-8, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Gradients are left in place.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(TensorError::Contract(format!("parameter {i} has no gradient")));
            }
            if self.first[i].len() != p.numel() {
                return Err(TensorError::Contract(format!("parameter {i} changed size")));
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        let step_size = T::of(self.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad().expect("checked above").to_vec();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + ob1 * gi;
                *vi = b2t * *vi + ob2 * gi * gi;
                *w = *w * decay - step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
