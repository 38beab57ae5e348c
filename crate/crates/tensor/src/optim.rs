use crate::params::{ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(set: &ParamSet<T>, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = set.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Adam { beta1, beta2, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Moment tensors, for checkpointing.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) {
        assert_eq!(first.len(), self.first.len(), "adam restore: moment count");
        assert_eq!(second.len(), self.second.len(), "adam restore: moment count");
        for (a, b) in first.iter().zip(&self.first) {
            assert_eq!(a.shape(), b.shape(), "adam restore: moment shape");
        }
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// Applies one update. Entries whose gradient is `None`, and buffers, are untouched.
    pub fn step(&mut self, set: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), set.len(), "adam: gradient count");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        for (i, entry) in set.entries_mut().iter_mut().enumerate() {
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            assert_eq!(g.shape(), entry.value.shape(), "adam: gradient shape for {}", entry.name);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &gi), mi), vi) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *p -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
