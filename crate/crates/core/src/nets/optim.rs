use crate::tensor::{Real, Tensor};

/// Stochastic gradient descent with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates `params[i]` from `grads[i]`; parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Option<Tensor<T>>]) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            debug_assert_eq!(p.shape(), g.shape());
            let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((w, vel), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = mu * *vel + gv;
                *w -= lr * *vel;
            }
        }
    }
}

/// Cosine-decayed learning rate at `step` of `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut p = Tensor::new([2], vec![1.0f64, 2.0]).unwrap();
        let g = Some(Tensor::new([2], vec![0.5, -1.0]).unwrap());
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(vec![&mut p], &[g]);
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::new([1], vec![0.0f64]).unwrap();
        let g = Tensor::new([1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(1.0, 0.5);
        opt.step(vec![&mut p], &[Some(g.clone())]);
        opt.step(vec![&mut p], &[Some(g)]);
        // velocities 1.0 then 1.5
        assert_eq!(p.data(), &[-2.5]);
    }

    #[test]
    fn missing_grad_leaves_param() {
        let mut p = Tensor::new([1], vec![3.0f32]).unwrap();
        Sgd::new(1.0, 0.9).step(vec![&mut p], &[None]);
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 11), 0.1);
        assert!(cosine_lr(0.1, 10, 11).abs() < 1e-15);
        assert!((cosine_lr(0.1, 5, 11) - 0.05).abs() < 1e-12);
    }
}
